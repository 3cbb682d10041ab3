"""Training, evaluation, preference sweeps and the two-quadratics toy.

Everything a run logs is a function of (config, seed): report.json holds no
timestamps, and wall-clock time goes to a separate timing.json.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import glob
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import data as dio
from . import metrics as mx
from .autodiff import NonFiniteError
from .balancers import (KINDS, LOSS_WEIGHTED, Preference, combine, min_norm_weights,
                        new_state)
from .losses import LossSpec
from .model import (RankerConfig, RankerParams, init_params, load_checkpoint,
                    per_task_gradients, save_checkpoint, scalar_gradient, score)

log = logging.getLogger("mtl2r")

NDCG_NOTE = "NDCG@k with gain 2^y-1, discount log2(i+1); lists with zero ideal DCG score 1.0"
BASELINE_NOTE = "baselines: same architecture and seed trained on one task (LS weight 1)"


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | letor | cache
    train: Optional[str] = None
    vali: Optional[str] = None
    test: Optional[str] = None
    tasks: dict = field(default_factory=dict)
    normalize: bool = True
    synthetic: dict = field(default_factory=dict)
    splits: list = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class OptimConfig:
    name: str = "adam"  # adam | sgd
    lr: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 32


@dataclass
class BalancerConfig:
    kind: str = "ls"
    params: dict = field(default_factory=dict)
    ray: Optional[list] = None
    ideal: Optional[list] = None


@dataclass
class EvalConfig:
    every: int = 50
    k: int = 30
    batch_size: int = 64
    window: int = 10


@dataclass
class SweepConfig:
    rays: int = 10
    rays_list: Optional[list] = None
    seed_mode: str = "shared"  # shared | per_ray | index


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    losses: list = field(default_factory=lambda: ["softmax-ce"])
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    out: str = "runs/default"
    baselines: Optional[object] = None  # per-task values or a baselines.json path
    single_task: Optional[int] = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["losses"] = [LossSpec.parse(s).to_dict() for s in self.losses]
        return d


_SECTIONS = {"data": DataConfig, "balancer": BalancerConfig, "optim": OptimConfig,
             "eval": EvalConfig, "sweep": SweepConfig}


def _build(cls, raw: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    sections = {k: _build(cls, raw.pop(k) or {}, k) for k, cls in _SECTIONS.items() if k in raw}
    cfg = _build(RunConfig, {**raw, **sections}, "config")
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def n_tasks_of(cfg: RunConfig) -> int:
    if cfg.data.kind == "synthetic":
        return int(cfg.data.synthetic.get("n_tasks", 2))
    spec = dio.TaskDerivationSpec(**cfg.data.tasks)
    return len(spec.selected)


def validate_config(cfg: RunConfig) -> None:
    if cfg.data.kind not in ("synthetic", "letor", "cache"):
        raise ValueError(f"data.kind must be synthetic, letor or cache, got {cfg.data.kind!r}")
    if cfg.balancer.kind not in KINDS:
        raise ValueError(f"unknown balancer {cfg.balancer.kind!r}")
    if cfg.optim.name not in ("adam", "sgd"):
        raise ValueError("optim.name must be adam or sgd")
    if cfg.optim.lr < 0 or cfg.optim.steps < 0 or cfg.optim.batch_size < 1:
        raise ValueError("optim: lr and steps must be >= 0, batch_size >= 1")
    if cfg.eval.every < 1 or cfg.eval.k < 1 or cfg.eval.window < 1:
        raise ValueError("eval: every, k and window must be >= 1")
    if cfg.sweep.seed_mode not in ("shared", "per_ray", "index"):
        raise ValueError("sweep.seed_mode must be shared, per_ray or index")
    specs = [LossSpec.parse(s) for s in cfg.losses]
    K = n_tasks_of(cfg)
    if len(specs) == 1 and K > 1:
        cfg.losses = [specs[0].to_dict() for _ in range(K)]
    elif len(specs) != K:
        raise ValueError(f"{len(specs)} losses configured for {K} tasks")
    if cfg.balancer.ray is not None and len(cfg.balancer.ray) != K:
        raise ValueError(f"preference ray has {len(cfg.balancer.ray)} entries for {K} tasks")
    if cfg.balancer.ideal is not None and len(cfg.balancer.ideal) != K:
        raise ValueError(f"ideal point has {len(cfg.balancer.ideal)} entries for {K} tasks")
    if cfg.single_task is not None and not 0 <= cfg.single_task < K:
        raise ValueError(f"single_task must lie in [0, {K})")
    if K < 2 and cfg.single_task is None:
        cfg.single_task = 0
    new_state(cfg.balancer.kind, max(K, 2), **cfg.balancer.params)  # rejects bad params


# --------------------------------------------------------------------------
# data


@dataclass
class Splits:
    train: dio.MultiTaskDataset
    vali: dio.MultiTaskDataset
    test: dio.MultiTaskDataset
    spec: Optional[dict] = None


def load_splits(cfg: DataConfig) -> Splits:
    if cfg.kind == "synthetic":
        ds = dio.make_synthetic(**cfg.synthetic)
        train, vali, test = dio.split_queries(ds, cfg.splits)
        spec = None
    elif cfg.kind == "cache":
        train, vali, test = (dio.load_dataset(p) for p in (cfg.train, cfg.vali, cfg.test))
        return Splits(train, vali, test)
    else:
        tspec = dio.TaskDerivationSpec(**cfg.tasks)
        train = dio.derive_tasks(dio.load_letor(cfg.train), tspec)
        vali = dio.derive_tasks(dio.load_letor(cfg.vali), tspec, train.edges)
        test = dio.derive_tasks(dio.load_letor(cfg.test), tspec, train.edges)
        spec = tspec.to_dict()
    if cfg.normalize:
        train, stats = dio.normalize_features(train)
        vali, _ = dio.normalize_features(vali, stats)
        test, _ = dio.normalize_features(test, stats)
    return Splits(train, vali, test, spec)


# --------------------------------------------------------------------------
# optimisers: the balancer's direction stands in for the gradient


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, d: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(theta), np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * d
        self.v = self.b2 * self.v + (1 - self.b2) * d * d
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr, self.mu = lr, momentum
        self.buf = None

    def step(self, theta: np.ndarray, d: np.ndarray) -> np.ndarray:
        self.buf = d.copy() if self.buf is None else self.mu * self.buf + d
        return theta - self.lr * self.buf


def make_optimizer(cfg: OptimConfig):
    if cfg.name == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.lr, cfg.momentum)


# --------------------------------------------------------------------------
# evaluation


def evaluate_dataset(params: RankerParams, ds: dio.MultiTaskDataset, k: int,
                     batch_size: int = 64) -> np.ndarray:
    """Per-task mean NDCG@k over the queries of ``ds``."""
    if ds.d_in != params.config.d_f:
        raise ValueError(f"data has {ds.d_in} input features, model expects {params.config.d_f}")
    per_query = []
    for batch in dio.eval_batches(ds, batch_size):
        s = score(params, batch, "eval").numpy()
        for b in range(s.shape[0]):
            m = batch.mask[b]
            per_query.append([mx.ndcg_from_scores(s[b, m], batch.labels[b, m, t], k)
                              for t in range(batch.n_tasks)])
    return np.mean(np.array(per_query), axis=0)


def _windowed(values: np.ndarray, window: int) -> tuple[float, float]:
    w = min(window, len(values))
    return float(np.mean(values[:w])), float(np.mean(values[-w:]))


def _baseline_values(spec, task_names: Sequence[str]) -> Optional[np.ndarray]:
    if spec is None:
        return None
    if isinstance(spec, (str, Path)):
        with open(spec) as fh:
            spec = json.load(fh)["baselines"]
    if isinstance(spec, dict):
        return np.array([float(spec[n]) for n in task_names])
    return np.asarray(spec, dtype=np.float64)


# --------------------------------------------------------------------------
# training


def train(cfg: RunConfig, out: Optional[str] = None, splits: Optional[Splits] = None,
          write: bool = True) -> tuple[dict, RankerParams]:
    """Run one training job. Returns (report, best parameters) and, when
    ``write``, fills the output directory with report.json, metrics.csv,
    trace.csv, timing.json and checkpoint.bin."""
    t0 = time.perf_counter()
    validate_config(cfg)
    out_dir = Path(out or cfg.out)
    splits = splits if splits is not None else load_splits(cfg.data)
    K = splits.train.n_tasks
    specs = [LossSpec.parse(s) for s in cfg.losses]
    if len(specs) != K:
        raise ValueError(f"{len(specs)} losses for {K} tasks in the data")

    mcfg = RankerConfig(d_f=splits.train.d_in, **cfg.model)
    params = init_params(mcfg, cfg.seed)
    theta = params.flat()
    opt = make_optimizer(cfg.optim)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    bal_rng = np.random.default_rng([cfg.seed, 2])
    stream = dio.batches(splits.train, cfg.optim.batch_size, mcfg.max_list_len, cfg.seed)

    kind = cfg.balancer.kind
    ray = cfg.balancer.ray if cfg.balancer.ray is not None else np.ones(K)
    pref = Preference(ray, cfg.balancer.ideal) if K > 1 else None
    state = new_state(kind, K, **cfg.balancer.params) if K > 1 else None
    log_var_opt = make_optimizer(cfg.optim) if kind == "uncertainty" else None

    losses_trace, objective_trace, validations = [], [], []
    best = (-np.inf, -1, theta.copy())

    def validate(step: int, theta_now: np.ndarray):
        nonlocal best
        p = RankerParams.from_flat(mcfg, theta_now)
        nd = evaluate_dataset(p, splits.vali, cfg.eval.k, cfg.eval.batch_size)
        validations.append({"step": step, "ndcg": nd.tolist()})
        if nd.mean() > best[0]:
            best = (float(nd.mean()), step, theta_now.copy())

    validate(0, theta)
    for step in range(1, cfg.optim.steps + 1):
        batch = next(stream)
        p = RankerParams.from_flat(mcfg, theta)
        try:
            if cfg.single_task is not None:
                onehot = np.eye(K)[cfg.single_task]
                d, values, coef = scalar_gradient(p, batch, specs, onehot, drop_rng)
            elif kind in LOSS_WEIGHTED:
                holder = {}

                def coefficients(v):
                    holder["c"] = combine(kind, v, None, pref, state, bal_rng)
                    return holder["c"].weights

                d, values, coef = scalar_gradient(p, batch, specs, coefficients, drop_rng)
                state = holder["c"].state
            else:
                G, values = per_task_gradients(p, batch, specs, drop_rng)
                res = combine(kind, values, G, pref, state, bal_rng)
                state, d, coef = res.state, res.direction, res.weights
        except (NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if not np.all(np.isfinite(values)):
            raise TrainingError(f"step {step}: non-finite loss {values}")
        if not np.all(np.isfinite(d)):
            raise TrainingError(f"step {step}: non-finite update direction")
        losses_trace.append(values.tolist())
        objective_trace.append(float(np.dot(coef, values)) if coef is not None
                               else float(values.mean()))
        theta = opt.step(theta, d)
        if log_var_opt is not None:
            s = state.data["log_vars"]
            state.data["log_vars"] = log_var_opt.step(s, state.data["log_vars_grad"])
        if step % cfg.eval.every == 0 or step == cfg.optim.steps:
            validate(step, theta)

    best_params = RankerParams.from_flat(mcfg, best[2])
    final = {"vali": evaluate_dataset(best_params, splits.vali, cfg.eval.k, cfg.eval.batch_size),
             "test": evaluate_dataset(best_params, splits.test, cfg.eval.k, cfg.eval.batch_size)}
    names = list(splits.train.task_names)
    base = _baseline_values(cfg.baselines, names)
    dm = None
    if base is not None:
        dm = mx.delta_m(mx.MetricPoint(final["test"], (1,) * K),
                        mx.MetricPoint(base, (1,) * K))
    obj = np.array(objective_trace)
    start, end = _windowed(obj, cfg.eval.window) if obj.size else (None, None)

    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "task_names": names,
        "n_params": params.n_params,
        "k": cfg.eval.k,
        "ndcg_convention": NDCG_NOTE,
        "train_losses": losses_trace,
        "train_objective": objective_trace,
        "objective_window": {"initial": start, "final": end, "window": cfg.eval.window},
        "validation": validations,
        "best_step": best[1],
        "final": {k: v.tolist() for k, v in final.items()},
        "baselines": None if base is None else base.tolist(),
        "baseline_note": BASELINE_NOTE if base is not None else None,
        "delta_m": dm,
    }
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"task_names": names, "k": cfg.eval.k, "data": dataclasses.asdict(cfg.data),
                 "task_spec": splits.spec,
                 "edges": {k: np.asarray(v).tolist() for k, v in splits.train.edges.items()},
                 "stats": None if splits.train.stats is None else
                 {k: np.asarray(v).tolist() for k, v in splits.train.stats.items()},
                 "balancer_state": None if state is None else state.to_dict()}
        save_checkpoint(out_dir / "checkpoint.bin", best_params, extra)
        if cfg.data.kind == "synthetic":
            (out_dir / "data").mkdir(exist_ok=True)
            for name in ("train", "vali", "test"):
                dio.save_dataset(out_dir / "data" / f"{name}.bin", getattr(splits, name))
        mx.write_json(out_dir / "report.json", report)
        mx.write_metrics_csv(out_dir / "metrics.csv",
                             [mx.ReportRow(out_dir.name, final["test"], dm)], names)
        write_trace(out_dir / "trace.csv", losses_trace, names)
        mx.write_json(out_dir / "timing.json", {"wall_clock_seconds": time.perf_counter() - t0})
    return report, best_params


def write_trace(path, losses: Sequence[Sequence[float]], names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *names])
        for i, row in enumerate(losses, start=1):
            w.writerow([i, *[repr(float(v)) for v in row]])


def train_baselines(cfg: RunConfig, out: Optional[str] = None) -> dict:
    """One single-task run per task; returns {task name: test NDCG@k}."""
    out_dir = Path(out or cfg.out)
    splits = load_splits(cfg.data)
    values = {}
    for t, name in enumerate(splits.train.task_names):
        c = copy.deepcopy(cfg)
        c.single_task = t
        c.baselines = None
        rep, _ = train(c, str(out_dir / f"single_{name}"), splits)
        values[name] = rep["final"]["test"][t]
    mx.write_json(out_dir / "baselines.json", {"baselines": values, "note": BASELINE_NOTE})
    return values


# --------------------------------------------------------------------------
# evaluation of a stored checkpoint


def _load_split(data_dir: Path, name: str, extra: dict) -> Optional[dio.MultiTaskDataset]:
    cache = data_dir / f"{name}.bin"
    if cache.exists():
        return dio.load_dataset(cache)
    text = data_dir / f"{name}.txt"
    if not text.exists():
        return None
    spec = dio.TaskDerivationSpec(**(extra.get("task_spec") or {}))
    ds = dio.derive_tasks(dio.load_letor(text), spec, extra.get("edges"))
    if extra.get("stats") is not None:
        ds, _ = dio.normalize_features(ds, extra["stats"])
    return ds


def evaluate(checkpoint, data_dir, k: Optional[int] = None,
             splits: Sequence[str] = ("vali", "test")) -> dict:
    """Per-split MetricPoints of mean NDCG@k for a saved checkpoint."""
    params, extra = load_checkpoint(checkpoint)
    k = int(k if k is not None else extra.get("k", 30))
    data_dir = Path(data_dir)
    out = {}
    for name in splits:
        ds = _load_split(data_dir, name, extra)
        if ds is None:
            continue
        out[name] = mx.MetricPoint(evaluate_dataset(params, ds, k), (1,) * ds.n_tasks, name)
    if not out:
        raise FileNotFoundError(f"{data_dir}: no {'/'.join(splits)} split (.bin or .txt)")
    return out


# --------------------------------------------------------------------------
# sweeps


def default_rays(n: int = 10) -> list[np.ndarray]:
    """n evenly spaced interior points (i/(n+1), 1 - i/(n+1)) of the 2-simplex."""
    return [np.array([i / (n + 1), 1 - i / (n + 1)]) for i in range(1, n + 1)]


def _ray_seed(seed: int, ray: np.ndarray, index: int, mode: str) -> int:
    if mode == "shared":
        return seed
    if mode == "index":
        return seed + index
    return (seed + zlib.crc32(np.asarray(ray, dtype="<f8").tobytes())) % (2 ** 31)


def front_of(points: Sequence[mx.MetricPoint], ref=None) -> tuple[mx.FrontSet, Optional[float]]:
    front = mx.pareto_filter(points)
    vol = None
    if points and points[0].values.size <= 3:
        vol, _ = mx.hvi(front.front, ref)
    return front, vol


def sweep(cfg: RunConfig, rays: Optional[Sequence] = None, out: Optional[str] = None) -> dict:
    """Train once per preference ray and report the resulting front.

    A failing ray is recorded with its error and the sweep carries on.
    """
    out_dir = Path(out or cfg.out)
    if rays is None:
        rays = cfg.sweep.rays_list or default_rays(cfg.sweep.rays)
    rays = [np.asarray(r, dtype=np.float64) for r in rays]
    if not rays:
        raise ValueError("sweep needs at least one ray")
    splits = load_splits(cfg.data)
    runs, points = [], []
    for i, r in enumerate(rays):
        c = copy.deepcopy(cfg)
        c.balancer.ray = r.tolist()
        c.seed = _ray_seed(cfg.seed, r, i, cfg.sweep.seed_mode)
        run_id = f"ray_{i:02d}"
        try:
            rep, _ = train(c, str(out_dir / run_id), splits)
        except Exception as exc:  # noqa: BLE001 - one bad ray must not end the sweep
            log.warning("%s failed: %s", run_id, exc)
            runs.append({"run_id": run_id, "ray": r.tolist(), "error": str(exc)})
            continue
        runs.append({"run_id": run_id, "ray": r.tolist(), "seed": c.seed,
                     "test": rep["final"]["test"], "delta_m": rep["delta_m"]})
        points.append(mx.MetricPoint(rep["final"]["test"], (1,) * len(r), run_id))
    front, vol = front_of(points) if points else (mx.FrontSet([]), None)
    flags = {p.label: bool(f) for p, f in zip(front.points, front.flags)}
    for run in runs:
        run["non_dominated"] = flags.get(run["run_id"])
    summary = {"runs": runs, "hvi": vol, "orientation": "ndcg, higher is better",
               "task_names": list(splits.train.task_names)}
    out_dir.mkdir(parents=True, exist_ok=True)
    mx.write_json(out_dir / "sweep.json", summary)
    ok = [r for r in runs if "error" not in r]
    mx.write_metrics_csv(out_dir / "front.csv",
                         [mx.ReportRow(r["run_id"], np.array(r["test"]), r["delta_m"], vol,
                                       r["non_dominated"]) for r in ok],
                         splits.train.task_names)
    return summary


def pareto_reports(pattern: str, out: Optional[str] = None, split: str = "test") -> dict:
    """Pareto filter and HVI over the final metrics of existing report.json files."""
    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        raise FileNotFoundError(f"no reports match {pattern!r}")
    points, names = [], None
    for p in paths:
        with open(p) as fh:
            rep = json.load(fh)
        names = names or rep["task_names"]
        points.append(mx.MetricPoint(rep["final"][split], (1,) * len(rep["task_names"]), p))
    front, vol = front_of(points)
    rows = [mx.ReportRow(pt.label, pt.values, None, vol, bool(f))
            for pt, f in zip(front.points, front.flags)]
    if out:
        mx.write_metrics_csv(Path(out), rows, names)
    return {"reports": [r.run_id for r in rows], "non_dominated": [r.non_dominated for r in rows],
            "values": [r.values.tolist() for r in rows], "hvi": vol}


# --------------------------------------------------------------------------
# two-quadratics toy


TOY_A = np.array([1.0, 0.0])
TOY_B = np.array([0.0, 1.0])
TOY_START = np.array([-1.0, -1.0])


def toy_losses(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Loss vector (‖θ-a‖², ‖θ-b‖²) and its (2, 2) gradient matrix."""
    da, db = theta - TOY_A, theta - TOY_B
    return np.array([da @ da, db @ db]), np.stack([2 * da, 2 * db])


def toy_front(t) -> np.ndarray:
    """Loss pair at θ = (1-t)·a + t·b on the Pareto segment."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([2 * t ** 2, 2 * (1 - t) ** 2], axis=-1)


@dataclass
class ToyResult:
    losses: np.ndarray   # (steps + 1, 2)
    theta: np.ndarray    # final parameters
    thetas: np.ndarray   # (steps + 1, 2)


def toy_problem(balancer: str = "ls", steps: int = 2000, lr: float = 0.01, ray=(0.5, 0.5),
                ideal=None, seed: int = 0, **params) -> ToyResult:
    """Plain gradient descent on the two quadratics from θ = (-1, -1)."""
    pref = Preference(ray, ideal)
    state = new_state(balancer, 2, **params)
    rng = np.random.default_rng(seed)
    theta = TOY_START.copy()
    thetas, losses = [theta.copy()], [toy_losses(theta)[0]]
    for _ in range(steps):
        L, G = toy_losses(theta)
        res = combine(balancer, L, G, pref, state, rng)
        state = res.state
        if balancer == "uncertainty":
            state.data["log_vars"] = state.data["log_vars"] - lr * state.data["log_vars_grad"]
        theta = theta - lr * res.direction
        thetas.append(theta.copy())
        losses.append(toy_losses(theta)[0])
    return ToyResult(np.array(losses), theta, np.array(thetas))


def toy_sweep(balancer: str, rays: Optional[Sequence] = None, steps: int = 2000, lr: float = 0.01,
              **params) -> list[ToyResult]:
    rays = default_rays() if rays is None else rays
    return [toy_problem(balancer, steps, lr, r, **params) for r in rays]


def toy_stationarity(theta: np.ndarray) -> float:
    """Norm of the min-norm convex combination of the two gradients at θ."""
    _, G = toy_losses(theta)
    return float(np.linalg.norm(min_norm_weights(G) @ G))
