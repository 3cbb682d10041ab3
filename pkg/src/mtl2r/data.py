"""LETOR text files to padded multi-task batches.

A LETOR line reads ``<grade> qid:<id> <fid>:<value> ... [# comment]``.
Task 0 is the relevance grade; every auxiliary feature id becomes one more
task and is dropped from the model input.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, TextIO, Union

import numpy as np

from .model import PaddedBatch

DATA_MAGIC = b"MTLRANK-DATA-V1\0"
N_FEATURES = 136
DEFAULT_AUX = (131, 132, 133, 135)


class LetorFormatError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


@dataclass
class LetorItem:
    grade: int
    features: dict  # 1-based feature id -> value


@dataclass
class RawDataset:
    queries: list = field(default_factory=list)  # [(qid, [LetorItem, ...]), ...]

    @property
    def n_items(self) -> int:
        return sum(len(items) for _, items in self.queries)

    def max_feature_id(self) -> int:
        return max((max(it.features, default=0) for _, items in self.queries for it in items),
                   default=0)


# --------------------------------------------------------------------------
# text format


def _parse_line(line: str, line_no: int):
    body = line.split("#", 1)[0].split()
    if not body:
        return None
    if len(body) < 2:
        raise LetorFormatError(line_no, "expected '<grade> qid:<id> ...'")
    try:
        grade = int(body[0])
    except ValueError:
        raise LetorFormatError(line_no, f"grade {body[0]!r} is not an integer") from None
    if not body[1].startswith("qid:") or len(body[1]) == 4:
        raise LetorFormatError(line_no, f"expected qid:<id>, got {body[1]!r}")
    qid = body[1][4:]
    feats = {}
    for tok in body[2:]:
        fid, sep, val = tok.partition(":")
        try:
            if not sep:
                raise ValueError
            fid_i, value = int(fid), float(val)
        except ValueError:
            raise LetorFormatError(line_no, f"malformed feature token {tok!r}") from None
        if fid_i < 1:
            raise LetorFormatError(line_no, f"feature id {fid_i} must be >= 1")
        if fid_i in feats:
            raise LetorFormatError(line_no, f"duplicate feature id {fid_i}")
        feats[fid_i] = value
    return qid, LetorItem(grade, feats)


def parse_letor(stream: Union[TextIO, Iterable[str]]) -> RawDataset:
    """Group items by qid; groups keep first-seen order, items file order."""
    groups: dict[str, list] = {}
    for line_no, line in enumerate(stream, start=1):
        parsed = _parse_line(line, line_no)
        if parsed is None:
            continue
        qid, item = parsed
        groups.setdefault(qid, []).append(item)
    if not groups:
        raise ValueError("empty LETOR file")
    return RawDataset(list(groups.items()))


def load_letor(path) -> RawDataset:
    with open(path) as fh:
        return parse_letor(fh)


def serialize_letor(raw: RawDataset, stream: Optional[TextIO] = None) -> str:
    out = io.StringIO() if stream is None else stream
    for qid, items in raw.queries:
        for it in items:
            feats = " ".join(f"{fid}:{float(it.features[fid])!r}" for fid in sorted(it.features))
            out.write(f"{it.grade} qid:{qid} {feats}".rstrip() + "\n")
    return out.getvalue() if stream is None else ""


# --------------------------------------------------------------------------
# multi-task derivation


@dataclass
class TaskDerivationSpec:
    """Which features become labels and how they are graded.

    ``bins`` > 0 grades each auxiliary feature into that many quantile bins;
    ``bins`` = 0 keeps raw values. ``tasks`` picks a subset of the task
    indices (0 = relevance grade, i = i-th auxiliary id); None keeps all.
    """

    aux_ids: tuple = DEFAULT_AUX
    bins: int = 5
    tasks: Optional[tuple] = None
    n_features: int = N_FEATURES

    def __post_init__(self):
        self.aux_ids = tuple(int(a) for a in self.aux_ids)
        if len(set(self.aux_ids)) != len(self.aux_ids):
            raise ValueError("auxiliary feature ids must be distinct")
        if any(not 1 <= a <= self.n_features for a in self.aux_ids):
            raise ValueError(f"auxiliary ids must lie in [1, {self.n_features}]")
        if self.bins == 1 or self.bins < 0:
            raise ValueError("bins must be >= 2 (quantile grading) or 0 (raw)")
        if self.tasks is not None:
            self.tasks = tuple(int(t) for t in self.tasks)
            if not self.tasks or any(not 0 <= t <= len(self.aux_ids) for t in self.tasks):
                raise ValueError(f"task indices must lie in [0, {len(self.aux_ids)}]")
            if len(set(self.tasks)) != len(self.tasks):
                raise ValueError("task indices must be distinct")

    @property
    def all_task_names(self) -> list[str]:
        return ["task0"] + [f"task{a}" for a in self.aux_ids]

    @property
    def selected(self) -> tuple:
        return self.tasks if self.tasks is not None else tuple(range(len(self.aux_ids) + 1))

    @property
    def task_names(self) -> list[str]:
        names = self.all_task_names
        return [names[t] for t in self.selected]

    @property
    def input_ids(self) -> list[int]:
        aux = set(self.aux_ids)
        return [f for f in range(1, self.n_features + 1) if f not in aux]

    def to_dict(self) -> dict:
        return {"aux_ids": list(self.aux_ids), "bins": self.bins,
                "tasks": None if self.tasks is None else list(self.tasks),
                "n_features": self.n_features}


def bi_objective_subsets(spec: TaskDerivationSpec) -> list[tuple[int, int]]:
    """Every unordered pair of task indices."""
    return list(combinations(range(len(spec.aux_ids) + 1), 2))


@dataclass
class Query:
    qid: str
    features: np.ndarray  # (l, d_in)
    labels: np.ndarray    # (l, K)


@dataclass
class MultiTaskDataset:
    queries: list
    input_ids: list          # original feature id of each input column
    task_names: list
    edges: dict = field(default_factory=dict)   # task name -> bin edges
    stats: Optional[dict] = None                # normalisation statistics

    @property
    def d_in(self) -> int:
        return len(self.input_ids)

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    def select_tasks(self, idx: Sequence[int]) -> "MultiTaskDataset":
        idx = list(idx)
        return MultiTaskDataset(
            [Query(q.qid, q.features, q.labels[:, idx]) for q in self.queries],
            list(self.input_ids), [self.task_names[i] for i in idx],
            {k: v for k, v in self.edges.items() if k in {self.task_names[i] for i in idx}},
            self.stats)


def quantile_edges(values: np.ndarray, bins: int) -> np.ndarray:
    qs = np.quantile(values, np.arange(1, bins) / bins)
    return np.unique(qs)


def apply_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # a value equal to an edge falls in the lower bin
    return np.searchsorted(edges, values, side="left").astype(np.float64)


def derive_tasks(raw: RawDataset, spec: TaskDerivationSpec,
                 edges: Optional[dict] = None) -> MultiTaskDataset:
    """Dense inputs without the auxiliary columns plus a (l, K) label matrix.

    Pass the training split's ``edges`` when deriving validation or test
    data; without them the edges are computed from ``raw`` itself.
    """
    spec = spec if isinstance(spec, TaskDerivationSpec) else TaskDerivationSpec(**spec)
    top = raw.max_feature_id()
    if top > spec.n_features:
        raise ValueError(f"feature id {top} exceeds the declared {spec.n_features} features")
    missing = [a for a in spec.aux_ids if a > top]
    if missing:
        raise ValueError(f"auxiliary feature ids {missing} lie beyond the data's "
                         f"largest feature id {top}")

    cols = np.array(spec.input_ids) - 1
    dense = []
    for qid, items in raw.queries:
        full = np.zeros((len(items), spec.n_features))
        for i, it in enumerate(items):
            for fid, v in it.features.items():
                full[i, fid - 1] = v
        grades = np.array([it.grade for it in items], dtype=np.float64)
        dense.append((qid, full, grades))

    names = spec.all_task_names
    aux = {t: spec.aux_ids[t - 1] for t in spec.selected if t > 0}  # task index -> feature id
    if spec.bins and edges is None:
        stacked = np.concatenate([full for _, full, _ in dense])
        edges = {names[t]: quantile_edges(stacked[:, a - 1], spec.bins) for t, a in aux.items()}
    if spec.bins:
        missing = [names[t] for t in aux if names[t] not in edges]
        if missing:
            raise ValueError(f"no bin edges for tasks {missing}")
        edges = {names[t]: np.asarray(edges[names[t]], dtype=np.float64) for t in aux}
    else:
        edges = {}

    queries = []
    for qid, full, grades in dense:
        labels = []
        for t in spec.selected:
            if t == 0:
                labels.append(grades)
            else:
                v = full[:, aux[t] - 1]
                labels.append(apply_bins(v, edges[names[t]]) if spec.bins else v)
        Y = np.stack(labels, axis=1)
        if np.any(Y < 0) or not np.all(np.isfinite(Y)):
            raise ValueError(f"query {qid}: labels must be finite and >= 0")
        queries.append(Query(qid, full[:, cols], Y))
    return MultiTaskDataset(queries, list(spec.input_ids), spec.task_names, edges)


# --------------------------------------------------------------------------
# normalisation


def _log_sign(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


def normalize_features(ds: MultiTaskDataset, stats: Optional[dict] = None):
    """sign(v)·log(1 + |v|), then z-score. Returns (new dataset, stats).

    ``stats`` from the training split should be reused for other splits.
    Zero-variance columns map to 0.
    """
    if stats is None:
        X = _log_sign(np.concatenate([q.features for q in ds.queries]))
        stats = {"mean": X.mean(axis=0), "std": X.std(axis=0)}
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    if mean.size != ds.d_in:
        raise ValueError(f"stats cover {mean.size} features, dataset has {ds.d_in}")
    safe = np.where(std > 0, std, 1.0)
    queries = [Query(q.qid, np.where(std > 0, (_log_sign(q.features) - mean) / safe, 0.0), q.labels)
               for q in ds.queries]
    stats = {"mean": mean, "std": std}
    return MultiTaskDataset(queries, list(ds.input_ids), list(ds.task_names),
                            dict(ds.edges), stats), stats


# --------------------------------------------------------------------------
# batching


def truncate_list(labels: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of at most ``cap`` items, keeping one positive item per
    task where the cap allows."""
    n = labels.shape[0]
    if n <= cap:
        return np.arange(n)
    required: list[int] = []
    for k in range(labels.shape[1]):
        pos = np.flatnonzero(labels[:, k] > 0)
        if pos.size and not np.any(np.isin(pos, required)):
            required.append(int(rng.choice(pos)))
    required = required[:cap]
    rest = np.setdiff1d(np.arange(n), required)
    extra = rng.choice(rest, size=cap - len(required), replace=False)
    return np.sort(np.concatenate([np.array(required, dtype=np.int64), extra]))


def pad_batch(queries: Sequence[Query], index_sets: Optional[Sequence[np.ndarray]] = None
              ) -> PaddedBatch:
    """Pad to the longest list in the batch."""
    if index_sets is None:
        index_sets = [np.arange(q.labels.shape[0]) for q in queries]
    L = max(len(ix) for ix in index_sets)
    d, K = queries[0].features.shape[1], queries[0].labels.shape[1]
    X = np.zeros((len(queries), L, d))
    Y = np.zeros((len(queries), L, K))
    M = np.zeros((len(queries), L), dtype=bool)
    for b, (q, ix) in enumerate(zip(queries, index_sets)):
        X[b, :len(ix)] = q.features[ix]
        Y[b, :len(ix)] = q.labels[ix]
        M[b, :len(ix)] = True
    return PaddedBatch(X, M, Y)


def epoch_batches(ds: MultiTaskDataset, batch_size: int, max_list_len: int,
                  rng: np.random.Generator) -> Iterator[PaddedBatch]:
    if max_list_len < 1 or batch_size < 1:
        raise ValueError("batch_size and max_list_len must be >= 1")
    order = rng.permutation(len(ds.queries))
    for start in range(0, order.size, batch_size):
        chunk = [ds.queries[i] for i in order[start:start + batch_size]]
        idx = [truncate_list(q.labels, max_list_len, rng) for q in chunk]
        yield pad_batch(chunk, idx)


def batches(ds: MultiTaskDataset, batch_size: int, max_list_len: int, seed: int
            ) -> Iterator[PaddedBatch]:
    """Endless stream of training batches; epoch e shuffles with the
    generator seeded by (seed, e)."""
    epoch = 0
    while True:
        yield from epoch_batches(ds, batch_size, max_list_len, np.random.default_rng([seed, epoch]))
        epoch += 1


def eval_batches(ds: MultiTaskDataset, batch_size: int) -> Iterator[PaddedBatch]:
    """File order, full lists."""
    for start in range(0, len(ds.queries), batch_size):
        yield pad_batch(ds.queries[start:start + batch_size])


# --------------------------------------------------------------------------
# synthetic data


def make_synthetic(n_queries: int = 500, list_len: int = 20, d_f: int = 10, n_tasks: int = 2,
                   bins: int = 5, noise: float = 0.1, seed: int = 0) -> MultiTaskDataset:
    """Queries of Gaussian features whose task-k grade is the quantile bin
    of a fixed linear score w_k·x plus noise. The w_k are orthonormal, so
    the tasks disagree on the ordering."""
    rng = np.random.default_rng(seed)
    W = np.linalg.qr(rng.standard_normal((d_f, n_tasks)))[0].T  # (K, d_f)
    X = rng.standard_normal((n_queries, list_len, d_f))
    S = X @ W.T + noise * rng.standard_normal((n_queries, list_len, n_tasks))
    Y = np.empty_like(S)
    edges = {}
    for k in range(n_tasks):
        e = quantile_edges(S[..., k].ravel(), bins)
        Y[..., k] = apply_bins(S[..., k], e)
        edges[f"task{k}"] = e
    queries = [Query(str(i), X[i], Y[i]) for i in range(n_queries)]
    return MultiTaskDataset(queries, list(range(1, d_f + 1)),
                            [f"task{k}" for k in range(n_tasks)], edges)


def split_queries(ds: MultiTaskDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1)
                  ) -> list[MultiTaskDataset]:
    """Consecutive query splits in the given proportions."""
    n = len(ds.queries)
    cuts = np.round(np.cumsum(fractions) / np.sum(fractions) * n).astype(int)
    bounds = [0, *cuts]
    return [MultiTaskDataset(ds.queries[a:b], list(ds.input_ids), list(ds.task_names),
                             dict(ds.edges), ds.stats) for a, b in zip(bounds[:-1], bounds[1:])]


# --------------------------------------------------------------------------
# binary cache:
#   16-byte magic | u64 header length | UTF-8 JSON header
#   | f64 LE features (all queries, row-major) | f64 LE labels
# The header lists qids, list lengths, input ids, task names, bin edges and
# normalisation statistics.


def save_dataset(path, ds: MultiTaskDataset) -> None:
    header = {
        "qids": [q.qid for q in ds.queries],
        "lengths": [int(q.labels.shape[0]) for q in ds.queries],
        "input_ids": [int(i) for i in ds.input_ids],
        "task_names": list(ds.task_names),
        "edges": {k: np.asarray(v).tolist() for k, v in ds.edges.items()},
        "stats": None if ds.stats is None else {k: np.asarray(v).tolist()
                                                for k, v in ds.stats.items()},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for q in ds.queries:
            fh.write(np.ascontiguousarray(q.features, dtype="<f8").tobytes())
        for q in ds.queries:
            fh.write(np.ascontiguousarray(q.labels, dtype="<f8").tobytes())


def load_dataset(path) -> MultiTaskDataset:
    buf = Path(path).read_bytes()
    if buf[:16] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset cache (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[16:24])
    header = json.loads(buf[24:24 + hlen].decode("utf-8"))
    d, K = len(header["input_ids"]), len(header["task_names"])
    lengths = header["lengths"]
    n = sum(lengths)
    body = np.frombuffer(buf, dtype="<f8", offset=24 + hlen)
    if body.size != n * (d + K):
        raise ValueError(f"{path}: payload size does not match header")
    X = body[:n * d].reshape(n, d).astype(np.float64)
    Y = body[n * d:].reshape(n, K).astype(np.float64)
    queries, start = [], 0
    for qid, ln in zip(header["qids"], lengths):
        queries.append(Query(qid, X[start:start + ln], Y[start:start + ln]))
        start += ln
    stats = header["stats"]
    if stats is not None:
        stats = {k: np.asarray(v, dtype=np.float64) for k, v in stats.items()}
    return MultiTaskDataset(queries, header["input_ids"], header["task_names"],
                            {k: np.asarray(v, dtype=np.float64) for k, v in header["edges"].items()},
                            stats)
