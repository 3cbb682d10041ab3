"""Multi-task balancing: turn K task losses and their gradient matrix G
(K × m) into one update direction.

    state = new_state("cagrad", n_tasks=2, c=0.5)
    out = combine("cagrad", losses, G, Preference.uniform(2), state, rng)
    out.direction      # length-m update direction
    out.weights        # c with direction = Gᵀc, or None (PCGrad, GradDrop)
    out.state          # carry into the next call
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import gradient as gm
from . import scalar as sc
from .gradient import (cagrad, ec_direction, epo_direction, graddrop, imtl_g, log_transform,
                       nash_weights, pcgrad, sdmgrad, wc_mgda_direction)
from .scalar import chebyshev
from .simplex import min_norm_weights, project_simplex

SCALARIZATION = ("ls", "sils", "wc", "soft_wc", "rlw", "uncertainty", "dwa", "ec")
GRADIENT = ("epo", "wc_mgda", "mgda", "graddrop", "pcgrad", "log_mgda", "cagrad",
            "log_cagrad", "imtl", "log_imtl", "nashmtl", "famo", "sdmgrad")
KINDS = SCALARIZATION + GRADIENT
PARETO_FRONT_KINDS = ("ls", "sils", "wc", "soft_wc", "epo", "wc_mgda", "ec")

# kinds whose coefficients do not depend on G: the trainer can backpropagate
# the weighted loss once instead of forming all K gradients
LOSS_WEIGHTED = ("ls", "sils", "wc", "soft_wc", "rlw", "uncertainty", "dwa", "ec", "famo")

DEFAULT_PARAMS = {
    "soft_wc": {"mu": 20.0},
    "dwa": {"temperature": 2.0},
    "epo": {"eps": 1e-3},
    "wc_mgda": {"mu": 50.0},
    "cagrad": {"c": 0.4},
    "log_cagrad": {"c": 0.4},
    "nashmtl": {"max_iters": 100},
    "famo": {"lr": 0.025},
    "sdmgrad": {"lam": 0.3, "inner_iters": 500},
    "ec": {"primary": 0, "bounds": None, "rho": 1.0},
}


@dataclass
class Preference:
    """A ray r (normalised to sum to one) and an ideal point z*."""

    r: np.ndarray
    ideal: Optional[np.ndarray] = None

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        if r.ndim != 1 or np.any(r <= 0):
            raise ValueError(f"preference ray must be a positive vector, got {self.r}")
        self.r = r / r.sum()
        self.ideal = (np.zeros_like(self.r) if self.ideal is None
                      else np.asarray(self.ideal, dtype=np.float64))

    @classmethod
    def uniform(cls, n_tasks: int) -> "Preference":
        return cls(np.ones(n_tasks))


@dataclass
class BalancerState:
    kind: str
    n_tasks: int
    params: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    step: int = 0

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, list):
                return [plain(x) for x in v]
            return v
        return {"kind": self.kind, "n_tasks": self.n_tasks, "params": plain(self.params),
                "data": {k: plain(v) for k, v in self.data.items()}, "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "BalancerState":
        data = {k: (np.asarray(v, dtype=np.float64) if k in _ARRAY_KEYS else v)
                for k, v in d.get("data", {}).items()}
        return cls(d["kind"], d["n_tasks"], dict(d.get("params", {})), data, d.get("step", 0))


_ARRAY_KEYS = {"xi", "prev_losses", "log_vars", "log_vars_grad", "multipliers", "nash_w", "sdm_w"}


def new_state(kind: str, n_tasks: int, **params) -> BalancerState:
    if kind not in KINDS:
        raise ValueError(f"unknown balancer {kind!r}; expected one of {KINDS}")
    unknown = set(params) - set(DEFAULT_PARAMS.get(kind, {}))
    if unknown:
        raise ValueError(f"{kind}: unknown parameters {sorted(unknown)}")
    state = BalancerState(kind, n_tasks, {**DEFAULT_PARAMS.get(kind, {}), **params})
    if kind == "famo":
        state.data["xi"] = np.zeros(n_tasks)
    elif kind == "uncertainty":
        state.data["log_vars"] = np.zeros(n_tasks)
    elif kind == "ec":
        state.data["multipliers"] = np.zeros(n_tasks)
    elif kind == "dwa":
        state.data["history"] = []
    return state


class Combination(NamedTuple):
    direction: Optional[np.ndarray]
    weights: Optional[np.ndarray]
    state: BalancerState
    objective: Optional[float] = None


def famo_step(state: BalancerState, losses) -> tuple[np.ndarray, BalancerState]:
    """Task weights softmax(ξ) after updating ξ from the last loss change.

    ξ takes one gradient step (size ``lr``) on Σ_k w_k·(log L_k(prev) -
    log L_k(now)): tasks whose log-loss fell least gain weight.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses <= 0):
        raise ValueError("famo needs strictly positive losses")
    state = copy.deepcopy(state)
    xi = state.data.setdefault("xi", np.zeros(losses.size))
    prev = state.data.get("prev_losses")
    if prev is not None:
        delta = np.log(prev) - np.log(losses)
        w = _softmax(xi)
        xi = xi - state.params.get("lr", 0.025) * (w * delta - w * (w @ delta))
    state.data["xi"] = xi
    state.data["prev_losses"] = losses.copy()
    return _softmax(xi), state


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def scalarize(kind: str, losses, pref: Preference, state: Optional[BalancerState] = None,
              rng: Optional[np.random.Generator] = None):
    """(objective, coefficients ∂objective/∂L, new state) for the pure
    scalarisations ls, sils, rlw, uncertainty and dwa."""
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    state = copy.deepcopy(state) if state is not None else new_state(kind, losses.size)
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "ls":
        value, w = sc.linear(losses, pref.r)
    elif kind == "sils":
        value, w = sc.scale_invariant_linear(losses, pref.r)
    elif kind == "rlw":
        value, w = sc.random_weights(losses, rng)
    elif kind == "uncertainty":
        value, w, gs = sc.uncertainty(losses, state.data["log_vars"])
        state.data["log_vars_grad"] = gs
    elif kind == "dwa":
        hist = state.data.setdefault("history", [])
        w = sc.dwa_weights(hist, losses.size, state.params.get("temperature", 2.0))
        value = float(w @ losses)
        state.data["history"] = (hist + [losses.tolist()])[-2:]
    else:
        raise ValueError(f"scalarize does not handle {kind!r}")
    return value, w, state


def combine(kind: str, losses, G, pref: Optional[Preference] = None,
            state: Optional[BalancerState] = None,
            rng: Optional[np.random.Generator] = None) -> Combination:
    """Update direction for one step of balancer ``kind``.

    ``G`` may be None for the kinds in LOSS_WEIGHTED; the result then carries
    only the coefficients. For every weighted kind direction = Gᵀ·weights.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown balancer {kind!r}; expected one of {KINDS}")
    losses = np.asarray(losses, dtype=np.float64)
    K = losses.size
    if G is not None:
        G = np.asarray(G, dtype=np.float64)
        if G.shape[0] != K:
            raise ValueError(f"G has {G.shape[0]} rows for {K} losses")
        if not np.all(np.isfinite(G)):
            raise ValueError("gradient matrix has non-finite entries")
    elif kind not in LOSS_WEIGHTED:
        raise ValueError(f"{kind} needs the gradient matrix")
    if K < 2:
        raise ValueError("balancers need at least two tasks")
    pref = pref if pref is not None else Preference.uniform(K)
    if state is None:
        state = new_state(kind, K)
    elif state.kind != kind:
        raise ValueError(f"state belongs to {state.kind!r}, not {kind!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    p = state.params
    objective = None

    if kind in ("ls", "sils", "rlw", "uncertainty", "dwa"):
        objective, w, state = scalarize(kind, losses, pref, state, rng)
    else:
        state = copy.deepcopy(state)
        if kind in ("wc", "soft_wc"):
            mu = 0.0 if kind == "wc" else float(p["mu"])
            objective, active = sc.chebyshev(losses, pref.r, pref.ideal, mu)
            w = active * pref.r
        elif kind == "ec":
            if p.get("bounds") is None:
                raise ValueError("ec needs per-task 'bounds'")
            w, lam = gm.ec_update(losses, int(p["primary"]), p["bounds"],
                                  state.data["multipliers"], float(p["rho"]))
            state.data["multipliers"] = lam
        elif kind == "famo":
            w, state = famo_step(state, losses)
        elif kind == "mgda":
            w = min_norm_weights(G)
        elif kind == "log_mgda":
            w = min_norm_weights(log_transform(G, losses)) / losses
        elif kind in ("imtl", "log_imtl"):
            H = G if kind == "imtl" else log_transform(G, losses)
            alpha, singular = gm.imtl_weights(H)
            state.data["singular"] = bool(singular)
            w = alpha if kind == "imtl" else alpha / losses
        elif kind in ("cagrad", "log_cagrad"):
            H = G if kind == "cagrad" else log_transform(G, losses)
            w = _cagrad_coefficients(H, float(p["c"]))
            if kind == "log_cagrad":
                w = w / losses
        elif kind == "sdmgrad":
            lam = float(p["lam"])
            inner = gm.sdmgrad_weights(G, lam, int(p["inner_iters"]), state.data.get("sdm_w"))
            state.data["sdm_w"] = inner
            w = (inner + lam / K) / (1.0 + lam)
        elif kind == "nashmtl":
            w = nash_weights(G, int(p["max_iters"]), state.data.get("nash_w"))
            state.data["nash_w"] = w
        elif kind == "epo":
            w, mode = gm.epo_weights(G, losses, pref.r, float(p["eps"]))
            state.data["mode"] = mode
        elif kind == "wc_mgda":
            w, _ = gm.wc_mgda_weights(G, losses, pref.r, pref.ideal, float(p["mu"]))
        elif kind == "pcgrad":
            w = None
            d = pcgrad(G, rng)
        else:  # graddrop
            w = None
            d = graddrop(G, rng)

    if w is not None:
        d = None if G is None else w @ G
    state.step += 1
    return Combination(d, w, state, objective)


def _cagrad_coefficients(G, c: float) -> np.ndarray:
    K = G.shape[0]
    g0 = G.mean(axis=0)
    root_phi = c * np.linalg.norm(g0)
    coef = np.full(K, 1.0 / K)
    if root_phi == 0.0:
        return coef
    w = gm.cagrad_weights(G, c)
    norm = np.linalg.norm(w @ G)
    if norm <= gm.EPS:
        return coef
    return coef + root_phi / norm * w


__all__ = [
    "KINDS", "SCALARIZATION", "GRADIENT", "PARETO_FRONT_KINDS", "LOSS_WEIGHTED",
    "Preference", "BalancerState", "Combination", "new_state", "combine", "scalarize",
    "famo_step", "chebyshev", "min_norm_weights", "project_simplex", "pcgrad", "cagrad", "imtl_g",
    "nash_weights", "sdmgrad", "graddrop", "epo_direction", "wc_mgda_direction",
    "ec_direction", "log_transform",
]
