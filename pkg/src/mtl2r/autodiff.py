"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every op whose inputs are attached to it. Leaves are
created with :meth:`Tape.variable`; anything built from plain arrays is a
constant and is never recorded.

    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0, 3.0]))
    y = reduce_sum(mul(x, x))
    grads = tape.backward(y)
    grads[x.node]          # array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # operator sugar; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple
    backward: Optional[Callable[[np.ndarray], tuple]]
    shape: tuple


class Tape:
    """Ordered record of ops. Node ids are positions in the record, so inputs
    always precede outputs."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64, copy=True), self, len(self._nodes))
        self._nodes.append(_Node((), None, t.shape))
        return t

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        node = len(self._nodes)
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self._nodes.append(_Node(ids, backward, data.shape))
        return Tensor(data, self, node)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``root`` with respect to every node that
        feeds it. Does not mutate the tape, so it may be called repeatedly
        with different roots (one per task)."""
        if root.tape is not self or root.node is None:
            raise ValueError("root is not recorded on this tape")
        if root.data.size != 1:
            raise ValueError(f"root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if inp is None or ig is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        return grads

    def grad(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(root)
        return [grads.get(t.node, np.zeros(t.shape)) if t.tape is self else np.zeros(t.shape)
                for t in wrt]


# --------------------------------------------------------------------------
# plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs are attached to different tapes")
            tape = t.tape
    return tape


def _check_finite(data: np.ndarray, kind: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind}: non-finite output")


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward, check=True) -> Tensor:
    if check:
        _check_finite(data, kind)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a} and {b} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# elementwise unary ops


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _emit("log", out, (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _emit("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _emit("softplus", out, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * xd)),))


# --------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape} @ {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), backward)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), check=False)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),), check=False)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", out, xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)), check=False)


def gather_rows(x, index) -> Tensor:
    """x[index] along axis 0; repeated indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    src = x.shape

    def backward(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", x.data[idx], (x,), backward, check=False)


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true. The mask broadcasts to x.
    Filling with -inf is allowed and is the intended input to softmax."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    _broadcast_shape(x.shape, m.shape, "masked_fill")
    if np.broadcast_shapes(x.shape, m.shape) != x.shape:
        raise ShapeError(f"masked_fill: mask {m.shape} would enlarge {x.shape}")
    out = np.where(m, float(value), x.data)
    if np.any(np.isnan(out)) or np.any(np.isposinf(out)):
        raise NonFiniteError("masked_fill: non-finite output")
    keep = ~m
    return _emit("masked_fill", out, (x,), lambda g: (g * keep,), check=False)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("reduce_sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    n = x.data.size if axis is None else np.prod([src[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _emit("reduce_mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,), backward)


# --------------------------------------------------------------------------
# last-dim normalisers


def _check_rows(xd: np.ndarray, kind: str) -> None:
    if xd.shape[-1] == 0 or np.any(np.all(np.isneginf(xd), axis=-1)):
        raise ValueError(f"{kind}: fully masked row")
    if np.any(np.isnan(xd)) or np.any(np.isposinf(xd)):
        raise NonFiniteError(f"{kind}: non-finite input")


def _softmax(xd: np.ndarray) -> np.ndarray:
    m = np.max(xd, axis=-1, keepdims=True)
    e = np.exp(xd - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis. -inf entries receive exactly zero weight."""
    x = as_tensor(x)
    _check_rows(x.data, "softmax")
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def logsumexp(x) -> Tensor:
    """log-sum-exp over the last axis (the axis is dropped)."""
    x = as_tensor(x)
    xd = x.data
    _check_rows(xd, "logsumexp")
    m = np.max(xd, axis=-1, keepdims=True)
    out = (m + np.log(np.sum(np.exp(xd - m), axis=-1, keepdims=True)))[..., 0]
    y = _softmax(xd)
    return _emit("logsumexp", out, (x,), lambda g: (g[..., None] * y,))


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with elementwise gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must be ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead)
        gbias = np.sum(g, axis=lead)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit("layernorm", xhat * gd + bias.data, (x, gain, bias), backward)


def dropout(x, keep: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/keep in training;
    evaluation mode (or keep == 1) is the identity."""
    x = as_tensor(x)
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout: keep probability must be in (0, 1], got {keep}")
    if not train or keep == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an explicit rng")
    m = (rng.random(x.shape) < keep) / keep
    return _emit("dropout", x.data * m, (x,), lambda g: (g * m,))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "log": log,
    "exp": exp,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "layernorm": layernorm,
    "dropout": dropout,
    "masked_fill": masked_fill,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "gather_rows": gather_rows,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at
    ``point`` and a central difference with step ``h``.

    ``f`` receives a Tensor shaped like ``point`` and must build its result
    only from ops in this module. The error per coordinate is
    |g - g_num| / max(1, |g|, |g_num|).
    """
    p = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(p)
    out = f(x)
    if out.data.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar")
    if out.tape is not tape:
        g = np.zeros_like(p)
    else:
        (g,) = tape.grad(out, [x])

    flat = p.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += h
        lo[i] -= h
        fh = float(f(Tensor(hi.reshape(p.shape))).data.reshape(-1)[0])
        fl = float(f(Tensor(lo.reshape(p.shape))).data.reshape(-1)[0])
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise NonFiniteError(f"finite_diff_check: f non-finite at probe {i}")
        num[i] = (fh - fl) / (2.0 * h)
    g = g.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(num)))
    return float(np.max(np.abs(g - num) / denom)) if flat.size else 0.0
