import copy
import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from mtl2r import data as dio
from mtl2r import metrics as mx
from mtl2r import runner
from mtl2r.model import RankerConfig, init_params
from mtl2r.runner import (TrainingError, config_from_dict, default_rays, evaluate, sweep,
                          toy_front, toy_problem, toy_stationarity, train)

TINY = {
    "data": {"kind": "synthetic",
             "synthetic": {"n_queries": 40, "list_len": 8, "d_f": 4, "n_tasks": 2, "seed": 0},
             "splits": [0.6, 0.2, 0.2]},
    "model": {"d_fc": 8, "n_blocks": 1, "n_heads": 2, "d_h": 8},
    "losses": ["mse", "listnet"],
    "balancer": {"kind": "ls", "ray": [0.5, 0.5]},
    "optim": {"lr": 0.01, "steps": 12, "batch_size": 4},
    "eval": {"every": 5, "k": 5, "window": 3},
}


def tiny(**over):
    raw = copy.deepcopy(TINY)
    for key, val in over.items():
        if isinstance(val, dict) and key in raw:
            raw[key] = {**raw[key], **val}
        else:
            raw[key] = val
    return config_from_dict(raw)


def cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "mtl2r", *args], capture_output=True, text=True,
                          cwd=cwd)


class TestConfig:
    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            config_from_dict({**TINY, "optimiser": {}})
        with pytest.raises(ValueError):
            tiny(optim={"learning_rate": 1.0})

    def test_task_count_consistency(self):
        with pytest.raises(ValueError):
            tiny(losses=["mse", "mse", "mse"])
        with pytest.raises(ValueError):
            tiny(balancer={"ray": [1.0, 1.0, 1.0]})
        with pytest.raises(ValueError):
            tiny(balancer={"kind": "cagrad", "params": {"cc": 1}})
        with pytest.raises(ValueError):
            tiny(balancer={"kind": "not-a-balancer"})

    def test_single_loss_is_replicated(self):
        assert len(tiny(losses=["ranknet"]).losses) == 2

    def test_dump_round_trip(self):
        cfg = tiny()
        again = config_from_dict(yaml.safe_load(runner.dump_config(cfg)))
        assert again.to_dict() == cfg.to_dict()

    def test_print_config_resolves_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
        res = cli("train", "--config", str(tmp_path / "c.yaml"), "--print-config")
        assert res.returncode == 0, res.stderr
        dumped = yaml.safe_load(res.stdout)
        assert dumped["optim"]["beta2"] == 0.999 and dumped["eval"]["batch_size"] == 64
        assert dumped["losses"][1] == {"kind": "listnet", "params": {}}
        assert not (tmp_path / "runs").exists()


class TestTrain:
    def test_zero_learning_rate_keeps_initial_params(self):
        for name in ("adam", "sgd"):
            cfg = tiny(optim={"lr": 0.0, "name": name})
            _, best = train(cfg, write=False)
            mcfg = RankerConfig(d_f=4, **cfg.model)
            np.testing.assert_array_equal(best.flat(), init_params(mcfg, cfg.seed).flat())

    def test_same_seed_same_report(self, tmp_path):
        train(tiny(), str(tmp_path / "a"))
        train(tiny(), str(tmp_path / "b"))
        assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()
        other, _ = train(tiny(seed=1), write=False)
        assert other["train_losses"] != json.loads((tmp_path / "a/report.json").read_text())[
            "train_losses"]

    def test_outputs(self, tmp_path):
        rep, _ = train(tiny(), str(tmp_path))
        for f in ("report.json", "metrics.csv", "trace.csv", "timing.json", "checkpoint.bin",
                  "data/train.bin", "data/vali.bin", "data/test.bin"):
            assert (tmp_path / f).exists(), f
        with open(tmp_path / "trace.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "task0", "task1"]
        assert len(rows) == 13
        np.testing.assert_array_equal(np.array(rows[1:], float)[:, 1:], rep["train_losses"])
        assert [v["step"] for v in rep["validation"]] == [0, 5, 10, 12]
        assert "wall" not in json.dumps(rep)
        assert np.all(np.isfinite(rep["train_losses"]))

    @pytest.mark.parametrize("kind,params", [
        ("mgda", {}), ("pcgrad", {}), ("uncertainty", {}), ("famo", {}), ("dwa", {}),
        ("nashmtl", {}), ("ec", {"bounds": [1.0, 1.0]}), ("soft_wc", {}), ("graddrop", {}),
    ])
    def test_balancer_kinds_train(self, kind, params):
        rep, _ = train(tiny(balancer={"kind": kind, "params": params},
                            optim={"steps": 4}), write=False)
        assert len(rep["train_losses"]) == 4

    def test_loss_weighted_path_matches_gradient_path(self, monkeypatch):
        # ls backpropagates the weighted loss once; forcing the per-task
        # gradient matrix plus combine() must give the same trajectory
        cfg = tiny(optim={"steps": 6, "name": "sgd"}, balancer={"ray": [0.3, 0.7]})
        fast, _ = train(copy.deepcopy(cfg), write=False)
        monkeypatch.setattr(runner, "LOSS_WEIGHTED", ())
        slow, _ = train(copy.deepcopy(cfg), write=False)
        np.testing.assert_allclose(fast["train_losses"], slow["train_losses"], rtol=1e-9)

    def test_non_finite_loss_aborts_with_step(self):
        cfg = tiny(optim={"name": "sgd", "lr": 1e200, "momentum": 0.0})
        with pytest.raises(TrainingError, match=r"step \d+"):
            train(cfg, write=False)

    def test_uncertainty_log_variances_move(self, tmp_path):
        train(tiny(balancer={"kind": "uncertainty"}), str(tmp_path))
        _, extra = runner.load_checkpoint(tmp_path / "checkpoint.bin")
        assert np.any(np.array(extra["balancer_state"]["data"]["log_vars"]) != 0)


class TestEvaluate:
    def test_matches_report_exactly(self, tmp_path):
        rep, _ = train(tiny(), str(tmp_path))
        res = evaluate(tmp_path / "checkpoint.bin", tmp_path / "data")
        assert res["test"].values.tolist() == rep["final"]["test"]
        assert res["vali"].values.tolist() == rep["final"]["vali"]

    def test_letor_files(self, letor_dir, tmp_path):
        cfg = tiny(data={"kind": "letor", "train": str(letor_dir / "train.txt"),
                         "vali": str(letor_dir / "vali.txt"), "test": str(letor_dir / "test.txt"),
                         "tasks": {"tasks": [0, 1]}, "synthetic": {}})
        rep, _ = train(cfg, str(tmp_path / "run"))
        res = evaluate(tmp_path / "run/checkpoint.bin", letor_dir)
        assert res["test"].values.tolist() == rep["final"]["test"]

    def test_cutoff_saturation(self, tmp_path):
        _, params = train(tiny(), str(tmp_path))
        ds = dio.load_dataset(tmp_path / "data/test.bin")
        a = runner.evaluate_dataset(params, ds, 8)
        b = runner.evaluate_dataset(params, ds, 1000)
        np.testing.assert_array_equal(a, b)

    def test_oracle_scorer(self):
        # one feature equals the task-0 grade; a linear model copying it ranks perfectly
        ds = dio.make_synthetic(n_queries=20, list_len=9, d_f=3, seed=4)
        for q in ds.queries:
            q.features[:, 0] = q.labels[:, 0]
        cfg = RankerConfig(d_f=3, d_fc=2, n_blocks=0, n_heads=1, d_h=2)
        p = init_params(cfg, 0)
        for name in p.arrays:
            p.arrays[name][...] = 0.0
        p.arrays["in.weight"][0, 0] = 1.0
        p.arrays["out.weight"][0, 0] = 1.0
        assert runner.evaluate_dataset(p, ds, 5)[0] == 1.0

    def test_dimension_mismatch(self, tmp_path):
        train(tiny(), str(tmp_path / "run"))
        other = dio.make_synthetic(n_queries=5, list_len=3, d_f=6, seed=0)
        (tmp_path / "d").mkdir()
        dio.save_dataset(tmp_path / "d/test.bin", other)
        with pytest.raises(ValueError):
            evaluate(tmp_path / "run/checkpoint.bin", tmp_path / "d")

    def test_missing_split(self, tmp_path):
        train(tiny(), str(tmp_path / "run"))
        with pytest.raises(FileNotFoundError):
            evaluate(tmp_path / "run/checkpoint.bin", tmp_path)


class TestBaselines:
    def test_single_task_runs_and_delta_m(self, tmp_path):
        values = runner.train_baselines(tiny(), str(tmp_path))
        assert set(values) == {"task0", "task1"}
        saved = json.loads((tmp_path / "baselines.json").read_text())
        assert saved["baselines"] == values
        rep, _ = train(tiny(baselines=str(tmp_path / "baselines.json")), write=False)
        base = np.array([values["task0"], values["task1"]])
        expected = np.mean(-(np.array(rep["final"]["test"]) - base) / base) * 100
        assert rep["delta_m"] == pytest.approx(expected, rel=1e-12)
        assert rep["baseline_note"]


class TestSweep:
    def test_default_rays(self):
        rays = default_rays()
        assert len(rays) == 10
        np.testing.assert_allclose(rays[0], [1 / 11, 10 / 11])
        np.testing.assert_allclose(rays[-1], [10 / 11, 1 / 11])

    def test_duplicate_rays_identical_reports(self, tmp_path):
        cfg = tiny(optim={"steps": 5})
        sweep(cfg, [[0.3, 0.7], [0.3, 0.7]], str(tmp_path))
        a = json.loads((tmp_path / "ray_00/report.json").read_text())
        b = json.loads((tmp_path / "ray_01/report.json").read_text())
        assert a == b

    def test_outputs_and_failed_ray(self, tmp_path):
        cfg = tiny(optim={"steps": 5})
        summary = sweep(cfg, [[0.2, 0.8], [1.0, 0.0], [0.8, 0.2]], str(tmp_path))
        assert "error" in summary["runs"][1]
        assert summary["runs"][0]["non_dominated"] is not None
        assert summary["hvi"] is not None and summary["hvi"] >= 0
        with open(tmp_path / "front.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3 and rows[0][:3] == ["run_id", "task0", "task1"]

    def test_seed_modes(self):
        r = np.array([0.25, 0.75])
        assert runner._ray_seed(3, r, 4, "shared") == 3
        assert runner._ray_seed(3, r, 4, "index") == 7
        assert runner._ray_seed(3, r, 4, "per_ray") == runner._ray_seed(3, r.copy(), 9, "per_ray")

    def test_pareto_over_reports(self, tmp_path):
        sweep(tiny(optim={"steps": 4}), [[0.2, 0.8], [0.8, 0.2]], str(tmp_path))
        res = runner.pareto_reports(str(tmp_path / "ray_*/report.json"), str(tmp_path / "f.csv"))
        assert len(res["reports"]) == 2 and (tmp_path / "f.csv").exists()
        V = np.array(res["values"])
        expected = mx.non_dominated(-V)
        assert res["non_dominated"] == expected.tolist()


class TestToy:
    def test_linear_scalarization_converges(self):
        res = toy_problem("ls", 2000, 0.01, (0.5, 0.5))
        np.testing.assert_allclose(res.theta, [0.5, 0.5], atol=1e-3)

    def test_chebyshev_equalises(self):
        res = toy_problem("wc", 2000, 0.01, (0.8, 0.2))
        L = res.losses[-1]
        assert abs(0.8 * L[0] - 0.2 * L[1]) <= 1e-2
        # analytic equalisation point on the segment: 0.8·2t² = 0.2·2(1-t)² -> t = 1/3
        np.testing.assert_allclose(L, toy_front(1 / 3), atol=1e-2)

    def test_mgda_is_pareto_stationary(self):
        res = toy_problem("mgda", 2000, 0.01)
        assert toy_stationarity(res.theta) <= 1e-3

    def test_dominant_ray_favours_its_task(self):
        skew = toy_problem("ls", 2000, 0.01, (0.99, 0.01)).losses[-1]
        even = toy_problem("ls", 2000, 0.01, (0.5, 0.5)).losses[-1]
        assert skew[0] <= even[0]

    @pytest.mark.parametrize("kind", ["ls", "wc", "soft_wc", "epo", "wc_mgda"])
    def test_front_finding_kinds_are_non_dominated(self, kind):
        results = runner.toy_sweep(kind, steps=2000)
        V = np.array([r.losses[-1] for r in results])
        assert mx.non_dominated(V).all()
        # every final point sits on the analytic front
        t = np.linspace(0, 1, 20001)
        F = toy_front(t)
        dist = np.min(np.linalg.norm(V[:, None] - F[None], axis=2), axis=1)
        assert dist.max() <= 1e-2

    def test_epsilon_constraint_front(self):
        V = []
        for bound in (0.2, 0.5, 1.0, 1.5):
            res = toy_problem("ec", 2000, 0.01, (0.5, 0.5), primary=0, bounds=[1e9, bound])
            V.append(res.losses[-1])
            assert res.losses[-1][1] <= bound + 1e-2
        assert mx.non_dominated(np.array(V)).all()


class TestCLI:
    def test_toy(self, tmp_path):
        res = cli("toy", "--balancer", "ls", "--steps", "500", "--trace", str(tmp_path / "t.csv"))
        assert res.returncode == 0, res.stderr
        out = json.loads(res.stdout)
        assert len(out["theta"]) == 2 and out["stationarity"] >= 0
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 501

    def test_train_evaluate_pareto(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(TINY))
        res = cli("train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "r"),
                  "--seed", "2")
        assert res.returncode == 0, res.stderr
        rep = json.loads((tmp_path / "r/report.json").read_text())
        assert rep["seed"] == 2
        res = cli("evaluate", "--checkpoint", str(tmp_path / "r/checkpoint.bin"),
                  "--data", str(tmp_path / "r/data"), "--k", "5")
        assert res.returncode == 0, res.stderr
        assert json.loads(res.stdout)["test"] == rep["final"]["test"]
        res = cli("pareto", "--reports", str(tmp_path / "*/report.json"))
        assert res.returncode == 0 and json.loads(res.stdout)["non_dominated"] == [True]

    def test_sweep_rays_file(self, tmp_path):
        raw = copy.deepcopy(TINY)
        raw["optim"]["steps"] = 3
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(raw))
        (tmp_path / "rays.txt").write_text("# two rays\n0.3 0.7\n0.6,0.4\n")
        res = cli("sweep", "--config", str(tmp_path / "c.yaml"), "--rays-file",
                  str(tmp_path / "rays.txt"), "--out", str(tmp_path / "s"))
        assert res.returncode == 0, res.stderr
        assert [r["ray"] for r in json.loads(res.stdout)["runs"]] == [[0.3, 0.7], [0.6, 0.4]]
        assert (tmp_path / "s/front.csv").exists()

    def test_bad_config_exit_code(self, tmp_path):
        (tmp_path / "c.yaml").write_text("losses: [nope]\n")
        res = cli("train", "--config", str(tmp_path / "c.yaml"))
        assert res.returncode == 2 and "error" in res.stderr
