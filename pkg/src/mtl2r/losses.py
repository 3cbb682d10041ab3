"""Mask-aware ranking losses over (B, L) score tensors.

Every loss is a mean over lists that have at least one valid contribution.
Pairwise kinds average over valid pairs (i, j) with label_i > label_j;
listwise kinds return one value per list. Padded items never contribute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("mse", "ordinal-bce", "ranknet", "lambdarank", "rank-hinge",
         "listnet", "listmle", "softmax-ce", "approx-ndcg")

_DEFAULTS = {
    "mse": {},
    "ordinal-bce": {"max_label": 4.0},
    "ranknet": {"sigma": 1.0},
    "lambdarank": {"sigma": 1.0, "k": 30},
    "rank-hinge": {"margin": 1.0},
    "listnet": {},
    "listmle": {},
    "softmax-ce": {},
    "approx-ndcg": {"temperature": 1.0},
}


@dataclass
class LossSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        self.params = {**_DEFAULTS[self.kind], **self.params}
        p = self.params
        for key in ("sigma", "temperature", "max_label"):
            if key in p and not p[key] > 0:
                raise ValueError(f"{self.kind}: {key} must be > 0")
        if "k" in p and int(p["k"]) < 1:
            raise ValueError(f"{self.kind}: cutoff k must be >= 1")

    @classmethod
    def parse(cls, obj) -> "LossSpec":
        if isinstance(obj, LossSpec):
            return obj
        if isinstance(obj, str):
            return cls(obj)
        obj = dict(obj)
        return cls(obj.pop("kind"), obj.pop("params", obj))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


def _exp_gain(labels: np.ndarray) -> np.ndarray:
    return np.power(2.0, labels) - 1.0


def _discount(ranks: np.ndarray) -> np.ndarray:
    return 1.0 / np.log2(1.0 + ranks)


def lambda_weights(labels, k: int, scores=None) -> np.ndarray:
    """|ΔNDCG@k| for swapping each pair of items in the current ordering.

    The ordering is by ``scores`` descending (ties by ascending index); with
    no scores the current position order is used. Returns a symmetric
    (L, L) matrix with zero diagonal.
    """
    y = np.asarray(labels, dtype=np.float64)
    L = y.size
    if k < 1:
        raise ValueError("cutoff k must be >= 1")
    order = np.arange(L) if scores is None else np.lexsort((np.arange(L), -np.asarray(scores)))
    ranks = np.empty(L)
    ranks[order] = np.arange(1, L + 1)
    disc = np.where(ranks <= k, _discount(ranks), 0.0)
    gain = _exp_gain(y)
    ideal = np.sort(gain)[::-1][:k]
    idcg = float(np.sum(ideal * _discount(np.arange(1, ideal.size + 1))))
    if idcg == 0.0:
        return np.zeros((L, L))
    return np.abs(np.subtract.outer(gain, gain) * np.subtract.outer(disc, disc)) / idcg


# --------------------------------------------------------------------------


def _pair_masks(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(B, L, L) booleans: both real and label_i > label_j."""
    real = mask[:, :, None] & mask[:, None, :]
    return real & (labels[:, :, None] > labels[:, None, :])


def _listwise_valid(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n = mask.sum(axis=1)
    big = np.where(mask, labels, -np.inf).max(axis=1)
    small = np.where(mask, labels, np.inf).min(axis=1)
    return (n >= 2) & (big > small)


def _weighted_total(terms: Tensor, weights: np.ndarray, like: Tensor) -> Tensor:
    if not np.any(weights):
        # no list contributes: a zero that is still attached to the tape
        return ad.reduce_sum(ad.scale(like, 0.0))
    return ad.reduce_sum(ad.mul(terms, weights))


def _pairwise(kind, p, s, y, mask):
    B, L = y.shape
    pairs = _pair_masks(y, mask).astype(np.float64)
    if kind == "lambdarank":
        k = int(p["k"])
        for b in range(B):
            idx = np.flatnonzero(mask[b])
            w = lambda_weights(y[b, idx], k, s.data[b, idx])
            full = np.zeros((L, L))
            full[np.ix_(idx, idx)] = w
            pairs[b] *= full
    counts = _pair_masks(y, mask).sum(axis=(1, 2))
    valid = counts > 0
    n_lists = valid.sum()
    weights = np.zeros((B, L, L))
    if n_lists:
        weights[valid] = pairs[valid] / (counts[valid][:, None, None] * n_lists)
    diff = ad.sub(ad.reshape(s, (B, L, 1)), ad.reshape(s, (B, 1, L)))  # s_i - s_j
    if kind == "rank-hinge":
        terms = ad.relu(ad.sub(float(p["margin"]), diff))
    else:
        terms = ad.softplus(ad.scale(diff, -float(p["sigma"])))
    return _weighted_total(terms, weights, s)


def _log_softmax(s: Tensor, mask: np.ndarray) -> Tensor:
    B, L = mask.shape
    lse = ad.logsumexp(ad.masked_fill(s, ~mask, -np.inf))
    return ad.sub(ad.masked_fill(s, ~mask, 0.0), ad.reshape(lse, (B, 1)))


def _target_ce(target: np.ndarray, valid: np.ndarray, s: Tensor, mask: np.ndarray) -> Tensor:
    n_lists = valid.sum()
    weights = np.zeros(mask.shape)
    if n_lists:
        weights[valid] = -target[valid] / n_lists
    return _weighted_total(_log_softmax(s, mask), weights, s)


def _listnet(s, y, mask):
    valid = _listwise_valid(y, mask)
    z = np.where(mask, y, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    target = e / e.sum(axis=1, keepdims=True)
    return _target_ce(target, valid, s, mask)


def _softmax_ce(s, y, mask):
    yy = np.where(mask, y, 0.0)
    tot = yy.sum(axis=1, keepdims=True)
    valid = _listwise_valid(y, mask) & (tot[:, 0] > 0)
    target = np.divide(yy, tot, out=np.zeros_like(yy), where=tot > 0)
    return _target_ce(target, valid, s, mask)


def _listmle(s, y, mask):
    B, L = y.shape
    valid = _listwise_valid(y, mask)
    n_lists = valid.sum()
    # label-descending order, ties by ascending index, padding last
    perm = np.stack([np.lexsort((np.arange(L), -np.where(mask[b], y[b], -np.inf)))
                     for b in range(B)])
    flat_idx = (perm + np.arange(B)[:, None] * L).reshape(-1)
    sorted_s = ad.reshape(ad.gather_rows(ad.reshape(s, (B * L,)), flat_idx), (B, L))
    n = mask.sum(axis=1)
    pos = np.arange(L)
    real_sorted = pos[None, :] < n[:, None]
    # suffix[b, i, j]: item j still unplaced when position i is chosen
    suffix = (pos[None, None, :] >= pos[None, :, None]) & real_sorted[:, None, :]
    suffix[~real_sorted] = True  # rows past the list end: any finite value, weight 0
    tiled = ad.add(ad.reshape(sorted_s, (B, 1, L)), np.zeros((B, L, L)))
    lse = ad.logsumexp(ad.masked_fill(tiled, ~suffix, -np.inf))
    terms = ad.sub(lse, sorted_s)
    weights = np.zeros((B, L))
    if n_lists:
        weights[valid] = real_sorted[valid] / n_lists
    return _weighted_total(terms, weights, s)


def _approx_ndcg(p, s, y, mask):
    B, L = y.shape
    t = float(p["temperature"])
    gain = np.where(mask, _exp_gain(y), 0.0)
    ideal = -np.sort(-gain, axis=1)
    idcg = (ideal * _discount(np.arange(1, L + 1))[None, :]).sum(axis=1)
    valid = (mask.sum(axis=1) >= 2) & (idcg > 0)
    n_lists = valid.sum()
    # [b, i, j] = s_j - s_i
    diff = ad.sub(ad.reshape(s, (B, 1, L)), ad.reshape(s, (B, L, 1)))
    others = mask[:, None, :] & ~np.eye(L, dtype=bool)[None]
    soft_rank = ad.add(ad.reduce_sum(ad.mul(ad.sigmoid(ad.scale(diff, 1.0 / t)), others), axis=-1), 1.0)
    # 1 / log2(1 + rank) = ln 2 / ln(1 + rank)
    disc = ad.div(np.log(2.0), ad.log(ad.add(soft_rank, 1.0)))
    weights = np.zeros((B, L))
    if n_lists:
        weights[valid] = -gain[valid] / (idcg[valid][:, None] * n_lists)
    # loss = 1 - mean approximate NDCG over valid lists
    total = _weighted_total(disc, weights, s)
    return ad.add(total, 1.0 if n_lists else 0.0)


def loss(spec, scores: Tensor, labels, mask) -> Tensor:
    """Scalar loss of ``spec`` for (B, L) scores, labels and mask."""
    spec = LossSpec.parse(spec)
    s = ad.as_tensor(scores)
    y = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if s.ndim != 2 or y.shape != s.shape or mask.shape != s.shape:
        raise ad.ShapeError(f"loss: scores {s.shape}, labels {y.shape}, mask {mask.shape} must match (B, L)")
    y = np.where(mask, y, 0.0)
    kind, p = spec.kind, spec.params

    if kind in ("mse", "ordinal-bce"):
        n = mask.sum(axis=1)
        valid = n > 0
        weights = np.zeros(y.shape)
        weights[valid] = mask[valid] / (n[valid][:, None] * valid.sum())
        if kind == "mse":
            d = ad.sub(s, y)
            out = _weighted_total(ad.mul(d, d), weights, s)
        else:
            target = np.clip(y / float(p["max_label"]), 0.0, 1.0)
            out = _weighted_total(ad.sub(ad.softplus(s), ad.mul(s, target)), weights, s)
    elif kind in ("ranknet", "lambdarank", "rank-hinge"):
        out = _pairwise(kind, p, s, y, mask)
    elif kind == "listnet":
        out = _listnet(s, y, mask)
    elif kind == "softmax-ce":
        out = _softmax_ce(s, y, mask)
    elif kind == "listmle":
        out = _listmle(s, y, mask)
    else:
        out = _approx_ndcg(p, s, y, mask)
    if not np.isfinite(out.item()):
        raise ad.NonFiniteError(f"{kind}: non-finite loss")
    return out
