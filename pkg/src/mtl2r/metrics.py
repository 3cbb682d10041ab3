"""Ranking and multi-objective evaluation: NDCG@k, Pareto filtering,
hypervolume and the relative multi-task change Δm%."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


# --------------------------------------------------------------------------
# NDCG


def _dcg(gains: np.ndarray, k: int) -> float:
    g = gains[:k]
    return float(np.sum(g / np.log2(np.arange(2, g.size + 2))))


def ndcg_at_k(labels, k: int) -> float:
    """NDCG@k of labels listed in ranked order (position 0 = top).

    Gain 2^y - 1, discount log2(i + 1). A list whose ideal DCG is zero
    scores 1.0.
    """
    if k < 1:
        raise ValueError(f"cutoff k must be >= 1, got {k}")
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1 or y.size < 1:
        raise ValueError("ndcg_at_k needs a non-empty 1-D label list")
    if np.any(y < 0):
        raise ValueError("labels must be >= 0")
    gains = np.power(2.0, y) - 1.0
    ideal = _dcg(np.sort(gains)[::-1], k)
    if ideal == 0.0:
        return 1.0
    return _dcg(gains, k) / ideal


def rank_order(scores) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(s.size), -s))


def ndcg_from_scores(scores, labels, k: int) -> float:
    y = np.asarray(labels, dtype=np.float64)
    return ndcg_at_k(y[rank_order(scores)], k)


def mean_ndcg(scores, labels, mask, k: int) -> float:
    """Mean NDCG@k over the rows of padded (B, L) arrays."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    vals = [ndcg_from_scores(scores[b, mask[b]], labels[b, mask[b]], k)
            for b in range(mask.shape[0])]
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# Pareto dominance


@dataclass
class MetricPoint:
    """Per-task values; orientation[k] = 1 if higher is better, 0 if lower."""

    values: np.ndarray
    orientation: tuple = ()
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not self.orientation:
            self.orientation = (0,) * self.values.size
        self.orientation = tuple(int(o) for o in self.orientation)
        if len(self.orientation) != self.values.size:
            raise ValueError(f"orientation has {len(self.orientation)} flags for "
                             f"{self.values.size} values")
        if any(o not in (0, 1) for o in self.orientation):
            raise ValueError("orientation flags must be 0 or 1")

    def minimization(self) -> np.ndarray:
        """Values with higher-is-better coordinates negated."""
        sign = np.where(np.array(self.orientation) == 1, -1.0, 1.0)
        return self.values * sign


@dataclass
class FrontSet:
    points: list
    flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def front(self) -> list:
        return [p for p, f in zip(self.points, self.flags) if f]


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """a dominates b in minimisation space."""
    return bool(np.all(a <= b) and np.any(a < b))


def non_dominated(values) -> np.ndarray:
    """Boolean flags for the rows of an (n, K) minimisation array."""
    V = np.asarray(values, dtype=np.float64)
    n = V.shape[0]
    flags = np.ones(n, dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j and dominates(V[j], V[i]):
                flags[i] = False
                break
    return flags


def pareto_filter(points: Sequence[MetricPoint]) -> FrontSet:
    points = list(points)
    if not points:
        return FrontSet([], np.zeros(0, dtype=bool))
    orient = points[0].orientation
    if any(p.orientation != orient for p in points):
        raise ValueError("pareto_filter: inconsistent orientations")
    return FrontSet(points, non_dominated(np.stack([p.minimization() for p in points])))


# --------------------------------------------------------------------------
# hypervolume


def hypervolume(points, ref) -> float:
    """Measure of the union of boxes [p, ref] for minimisation points.

    Points not strictly below ``ref`` in every coordinate contribute
    nothing and are dropped. Exact for two and three objectives.
    """
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    P = np.asarray(points, dtype=np.float64).reshape(-1, ref.size)
    K = ref.size
    if K >= 4:
        raise ValueError("hypervolume supports 1 to 3 objectives")
    P = P[np.all(P < ref, axis=1)]
    if P.shape[0] == 0:
        return 0.0
    P = np.unique(P[non_dominated(P)], axis=0)
    if K == 1:
        return float(ref[0] - P[:, 0].min())
    if K == 2:
        return _hv2(P, ref)
    return _hv_inclusion_exclusion(P, ref)


def _hv2(P: np.ndarray, ref: np.ndarray) -> float:
    # non-dominated and sorted by x ascending, so y is descending
    P = P[np.argsort(P[:, 0])]
    total, prev_y = 0.0, ref[1]
    for x, y in P:
        total += (ref[0] - x) * (prev_y - y)
        prev_y = y
    return float(total)


def _hv_inclusion_exclusion(P: np.ndarray, ref: np.ndarray) -> float:
    # Σ over subsets S of (-1)^{|S|+1} vol(∩ boxes); a subset whose
    # intersection is empty has only empty supersets, so it is pruned
    n = P.shape[0]
    total = 0.0

    def walk(start: int, corner: np.ndarray, size: int):
        nonlocal total
        for i in range(start, n):
            c = np.maximum(corner, P[i])
            vol = float(np.prod(ref - c))
            if vol <= 0.0:
                continue
            total += vol if size % 2 == 0 else -vol
            walk(i + 1, c, size + 1)

    walk(0, np.full(ref.size, -np.inf), 0)
    return total


def default_reference(minimization_values, margin: float = 0.1) -> np.ndarray:
    return np.asarray(minimization_values, dtype=np.float64).max(axis=0) + margin


def hvi(points: Sequence[MetricPoint], ref=None) -> tuple[float, np.ndarray]:
    """Hypervolume of metric points in minimisation space.

    Higher-is-better coordinates are negated first. Returns (volume, ref);
    ``ref`` defaults to the coordinate-wise max plus 0.1.
    """
    V = np.stack([p.minimization() for p in points])
    ref = default_reference(V) if ref is None else np.asarray(ref, dtype=np.float64)
    return hypervolume(V, ref), ref


# --------------------------------------------------------------------------
# Δm%


def delta_m(model: MetricPoint, baseline: MetricPoint) -> float:
    """Mean signed relative change versus the baseline, in percent.

    Improvements are negative, so lower is better.
    """
    if model.orientation != baseline.orientation:
        raise ValueError("delta_m: orientations differ")
    if np.any(baseline.values == 0):
        raise ValueError("delta_m: baseline has a zero coordinate")
    sign = np.where(np.array(model.orientation) == 1, -1.0, 1.0)
    rel = (model.values - baseline.values) / baseline.values
    return float(np.mean(sign * rel) * 100.0)


# --------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    run_id: str
    values: np.ndarray
    delta_m: Optional[float] = None
    hvi: Optional[float] = None
    non_dominated: Optional[bool] = None


def write_metrics_csv(path, rows: Sequence[ReportRow], task_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", *task_names, "delta_m", "hvi", "non_dominated"])
        for r in rows:
            w.writerow([r.run_id, *[repr(float(v)) for v in r.values],
                        "" if r.delta_m is None else repr(r.delta_m),
                        "" if r.hvi is None else repr(r.hvi),
                        "" if r.non_dominated is None else int(r.non_dominated)])


def to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = [
    "ndcg_at_k", "ndcg_from_scores", "mean_ndcg", "rank_order", "MetricPoint", "FrontSet",
    "dominates", "non_dominated", "pareto_filter", "hypervolume", "hvi", "default_reference",
    "delta_m", "ReportRow", "write_metrics_csv", "write_json", "to_jsonable",
]
