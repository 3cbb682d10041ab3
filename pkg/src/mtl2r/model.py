"""Transformer cross-encoder that scores every item of a padded list.

Items are tokens and carry no positional encoding, so the scorer is
permutation-equivariant over list positions. One scalar head is shared by
all tasks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

CKPT_MAGIC = b"MTLRANK-CKPT-V1\0"


@dataclass
class RankerConfig:
    d_f: int
    d_fc: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    d_h: int = 128
    keep_prob: float = 0.9
    max_list_len: int = 128
    ln_eps: float = 1e-5
    # scale attention logits by sqrt(d_fc) instead of sqrt(d_fc / n_heads)
    scale_by_model_dim: bool = False

    def __post_init__(self):
        for name in ("d_f", "d_fc", "n_heads", "d_h", "max_list_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"RankerConfig.{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("RankerConfig.n_blocks must be >= 0")
        if self.d_fc % self.n_heads:
            raise ValueError(f"d_fc={self.d_fc} is not divisible by n_heads={self.n_heads}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    @property
    def d_head(self) -> int:
        return self.d_fc // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: RankerConfig) -> list[tuple[str, tuple]]:
    """Parameter names and shapes in flat-vector order."""
    f, h = config.d_fc, config.d_h
    shapes = [("in.weight", (config.d_f, f)), ("in.bias", (f,))]
    for b in range(config.n_blocks):
        p = f"blocks.{b}."
        for proj in ("q", "k", "v", "o"):
            shapes += [(p + f"attn.{proj}.weight", (f, f)), (p + f"attn.{proj}.bias", (f,))]
        shapes += [(p + "ln1.gain", (f,)), (p + "ln1.bias", (f,)),
                   (p + "ff1.weight", (f, h)), (p + "ff1.bias", (h,)),
                   (p + "ff2.weight", (h, f)), (p + "ff2.bias", (f,)),
                   (p + "ln2.gain", (f,)), (p + "ln2.bias", (f,))]
    shapes += [("out.weight", (f, 1)), ("out.bias", (1,))]
    return shapes


class RankerParams:
    """Named parameter arrays with a fixed flat-vector coordinate order."""

    def __init__(self, config: RankerConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.shapes = param_shapes(config)
        missing = [n for n, _ in self.shapes if n not in arrays]
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        self.arrays = {n: np.asarray(arrays[n], dtype=np.float64).reshape(s)
                       for n, s in self.shapes}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].reshape(-1) for n, _ in self.shapes])

    @classmethod
    def from_flat(cls, config: RankerConfig, vec: np.ndarray) -> "RankerParams":
        vec = np.asarray(vec, dtype=np.float64)
        arrays, i = {}, 0
        for name, shape in param_shapes(config):
            n = int(np.prod(shape))
            arrays[name] = vec[i:i + n].reshape(shape).copy()
            i += n
        if i != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, config needs {i}")
        return cls(config, arrays)

    def tensors(self, tape: Optional[Tape] = None) -> dict[str, Tensor]:
        if tape is None:
            return {n: Tensor(a) for n, a in self.arrays.items()}
        return {n: tape.variable(a) for n, a in self.arrays.items()}


def param_count(config: RankerConfig) -> int:
    f, h = config.d_fc, config.d_h
    per_block = 4 * (f * f + f) + (f * h + h) + (h * f + f) + 4 * f
    return config.d_f * f + f + config.n_blocks * per_block + f + 1


def init_params(config: RankerConfig, seed: int) -> RankerParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config):
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return RankerParams(config, arrays)


@dataclass
class PaddedBatch:
    features: np.ndarray  # (B, L, d_f)
    mask: np.ndarray      # (B, L) bool, True = real item
    labels: np.ndarray    # (B, L, K)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 2:
            self.labels = self.labels[..., None]
        B, L = self.mask.shape
        if self.features.shape[:2] != (B, L) or self.labels.shape[:2] != (B, L):
            raise ValueError("features, mask and labels disagree on (B, L)")
        if not np.all(self.mask.any(axis=1)):
            raise ValueError("every list needs at least one real item")

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[-1]


def attention(q, k, v, mask, scale: Optional[float] = None) -> Tensor:
    """softmax(q kᵀ / scale) v with masked keys excluded.

    q, k, v: (..., L, d) tensors; mask: (..., L) booleans over keys (True =
    attendable). ``scale`` defaults to sqrt(d).
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("attention: all positions masked")
    d = q.shape[-1]
    if scale is None:
        scale = np.sqrt(d)
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    logits = ad.scale(ad.matmul(q, ad.transpose(k, perm)), 1.0 / scale)
    logits = ad.masked_fill(logits, ~mask[..., None, :], -np.inf)
    return ad.matmul(ad.softmax(logits), v)


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def score(params: RankerParams, batch: PaddedBatch, mode: str = "eval",
          rng: Optional[np.random.Generator] = None,
          tensors: Optional[dict[str, Tensor]] = None) -> Tensor:
    """Scores of shape (B, L); padded slots get scores that losses mask out.

    Pass ``tensors=params.tensors(tape)`` to record the forward pass for
    differentiation; otherwise parameters enter as constants.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    config = params.config
    P = params.tensors() if tensors is None else tensors
    train = mode == "train"
    B, L, d_f = batch.features.shape
    if d_f != config.d_f:
        raise ValueError(f"batch has d_f={d_f}, model expects {config.d_f}")
    H, dk, f = config.n_heads, config.d_head, config.d_fc
    scale = np.sqrt(f if config.scale_by_model_dim else dk)
    key_mask = batch.mask[:, None, :]  # broadcast over heads

    x = _linear(Tensor(batch.features), P["in.weight"], P["in.bias"])
    for b in range(config.n_blocks):
        p = f"blocks.{b}."

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, L, H, dk)), (0, 2, 1, 3))

        q = heads(_linear(x, P[p + "attn.q.weight"], P[p + "attn.q.bias"]))
        k = heads(_linear(x, P[p + "attn.k.weight"], P[p + "attn.k.bias"]))
        v = heads(_linear(x, P[p + "attn.v.weight"], P[p + "attn.v.bias"]))
        att = attention(q, k, v, key_mask, scale=scale)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, f))
        mh = _linear(att, P[p + "attn.o.weight"], P[p + "attn.o.bias"])
        z = ad.layernorm(ad.add(x, ad.dropout(mh, config.keep_prob, rng, train)),
                         P[p + "ln1.gain"], P[p + "ln1.bias"], config.ln_eps)
        ff = _linear(ad.relu(_linear(z, P[p + "ff1.weight"], P[p + "ff1.bias"])),
                     P[p + "ff2.weight"], P[p + "ff2.bias"])
        x = ad.layernorm(ad.add(z, ad.dropout(ff, config.keep_prob, rng, train)),
                         P[p + "ln2.gain"], P[p + "ln2.bias"], config.ln_eps)
    out = _linear(x, P["out.weight"], P["out.bias"])
    return ad.reshape(out, (B, L))


def per_task_gradients(params: RankerParams, batch: PaddedBatch, losses: Sequence,
                       rng: Optional[np.random.Generator] = None, mode: str = "train"):
    """One forward pass, one backward per task.

    Returns (G, values): G is (K, n_params) with row k the flattened gradient
    of task k's loss, values the K loss values.
    """
    from .losses import loss as loss_fn

    if len(losses) < 1:
        raise ValueError("need at least one loss spec")
    if batch.n_tasks < len(losses):
        raise ValueError(f"batch has {batch.n_tasks} label columns, {len(losses)} losses given")
    tape = Tape()
    P = params.tensors(tape)
    s = score(params, batch, mode, rng, tensors=P)
    leaves = [P[n] for n, _ in params.shapes]
    G = np.empty((len(losses), params.n_params))
    values = np.empty(len(losses))
    for k, spec in enumerate(losses):
        lk = loss_fn(spec, s, batch.labels[..., k], batch.mask)
        values[k] = lk.item()
        if not np.isfinite(values[k]):
            raise ad.NonFiniteError(f"task {k} loss is non-finite")
        G[k] = np.concatenate([g.reshape(-1) for g in tape.grad(lk, leaves)])
    return G, values


def scalar_gradient(params: RankerParams, batch: PaddedBatch, losses: Sequence,
                    weights, rng: Optional[np.random.Generator] = None,
                    mode: str = "train"):
    """Gradient of Σ_k weights[k]·L_k by a single backward pass.

    ``weights`` is an array or a function of the K loss values (for
    coefficients that depend on the current losses). Returns (gradient,
    loss values, weights used)."""
    from .losses import loss as loss_fn

    tape = Tape()
    P = params.tensors(tape)
    s = score(params, batch, mode, rng, tensors=P)
    terms = [loss_fn(spec, s, batch.labels[..., k], batch.mask) for k, spec in enumerate(losses)]
    values = np.array([t.item() for t in terms])
    if not np.all(np.isfinite(values)):
        raise ad.NonFiniteError("non-finite task loss")
    weights = np.asarray(weights(values) if callable(weights) else weights, dtype=np.float64)
    total = ad.scale(terms[0], weights[0])
    for w, t in zip(weights[1:], terms[1:]):
        total = ad.add(total, ad.scale(t, w))
    leaves = [P[n] for n, _ in params.shapes]
    grad = np.concatenate([g.reshape(-1) for g in tape.grad(total, leaves)])
    return grad, values, weights


# --------------------------------------------------------------------------
# checkpoint file:
#   16-byte magic | u64 header length | UTF-8 JSON header | u64 n | n × f64 (LE)


def save_checkpoint(path, params: RankerParams, extra: Optional[dict] = None) -> None:
    header = {"ranker": params.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = params.flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[RankerParams, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    f = io.BytesIO(buf)
    if f.read(16) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", f.read(8))
    header = json.loads(f.read(hlen).decode("utf-8"))
    (n,) = struct.unpack("<Q", f.read(8))
    flat = np.frombuffer(f.read(8 * n), dtype="<f8")
    if flat.size != n:
        raise ValueError(f"{path}: truncated parameter block")
    config = RankerConfig(**header["ranker"])
    return RankerParams.from_flat(config, flat.astype(np.float64)), header.get("extra", {})
