"""Command line entry point: ``mtl2r {train,evaluate,sweep,toy,pareto,baselines}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import runner
from .balancers import KINDS


def _load(args) -> runner.RunConfig:
    cfg = runner.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.print_config:
        sys.stdout.write(runner.dump_config(cfg))
        return 0
    report, _ = runner.train(cfg)
    _emit({"out": cfg.out, "best_step": report["best_step"], "final": report["final"],
           "delta_m": report["delta_m"]})
    return 0


def cmd_baselines(args) -> int:
    cfg = _load(args)
    _emit(runner.train_baselines(cfg))
    return 0


def cmd_evaluate(args) -> int:
    res = runner.evaluate(args.checkpoint, args.data, args.k)
    _emit({split: mp.values.tolist() for split, mp in res.items()})
    return 0


def _read_rays(path) -> list:
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return json.loads(text)
    return [[float(x) for x in line.replace(",", " ").split()]
            for line in text.splitlines() if line.strip() and not line.startswith("#")]


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.print_config:
        sys.stdout.write(runner.dump_config(cfg))
        return 0
    rays = _read_rays(args.rays_file) if args.rays_file else runner.default_rays(
        args.rays if args.rays is not None else cfg.sweep.rays)
    summary = runner.sweep(cfg, rays)
    _emit({"hvi": summary["hvi"],
           "runs": [{k: r.get(k) for k in ("run_id", "ray", "test", "non_dominated", "error")}
                    for r in summary["runs"]]})
    return 0


def cmd_toy(args) -> int:
    params = json.loads(args.params) if args.params else {}
    ray = [float(x) for x in args.ray.split(",")]
    res = runner.toy_problem(args.balancer, args.steps, args.lr, ray, **params)
    if args.trace:
        runner.write_trace(args.trace, res.losses[1:], ["loss1", "loss2"])
    _emit({"theta": res.theta.tolist(), "final_losses": res.losses[-1].tolist(),
           "stationarity": runner.toy_stationarity(res.theta)})
    return 0


def cmd_pareto(args) -> int:
    _emit(runner.pareto_reports(args.reports, args.out, args.split))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtl2r", description="Multi-task learning to rank")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baselines", help="single-task runs used as the Δm reference")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("evaluate", help="NDCG@k of a checkpoint on vali/test splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with {vali,test}.bin or .txt")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="one run per preference ray, then Pareto filter and HVI")
    p.add_argument("--config", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rays", type=int, help="number of evenly spaced bi-objective rays")
    g.add_argument("--rays-file", help="JSON list or one whitespace-separated ray per line")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("toy", help="two-quadratics problem")
    p.add_argument("--balancer", choices=KINDS, default="ls")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--ray", default="0.5,0.5")
    p.add_argument("--params", help="balancer parameters as JSON")
    p.add_argument("--trace", help="write the loss trajectory to this CSV")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("pareto", help="Pareto filter and HVI over existing report.json files")
    p.add_argument("--reports", required=True, help="glob, e.g. 'runs/*/report.json'")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write front.csv here")
    p.set_defaults(func=cmd_pareto)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, runner.TrainingError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
