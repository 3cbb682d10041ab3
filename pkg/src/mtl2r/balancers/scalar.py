"""Scalarisations: collapse the loss vector into one objective.

Each function returns the objective value and the coefficients
c_k = ∂objective/∂L_k, so the update direction is Gᵀc.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .gradient import chebyshev_active


def linear(losses, r):
    losses, r = np.asarray(losses, float), np.asarray(r, float)
    return float(r @ losses), r.copy()


def scale_invariant_linear(losses, r):
    losses, r = np.asarray(losses, float), np.asarray(r, float)
    if np.any(losses <= 0):
        raise ValueError("sils needs strictly positive losses")
    return float(r @ np.log(losses)), r / losses


def random_weights(losses, rng: np.random.Generator):
    z = rng.standard_normal(len(losses))
    w = np.exp(z - z.max())
    w /= w.sum()
    return float(w @ np.asarray(losses, float)), w


def uncertainty(losses, log_vars):
    """Σ (e^{-s_k} L_k + s_k) / 2. Returns (objective, coefficients, ∂/∂s)."""
    losses, s = np.asarray(losses, float), np.asarray(log_vars, float)
    prec = np.exp(-s)
    value = float(0.5 * np.sum(prec * losses + s))
    return value, 0.5 * prec, 0.5 * (1.0 - prec * losses)


def dwa_weights(history: list, n_tasks: int, temperature: float = 2.0) -> np.ndarray:
    """K·softmax(L(t-1) / L(t-2) / T); all ones until two past steps exist."""
    if len(history) < 2:
        return np.ones(n_tasks)
    ratio = np.asarray(history[-1], float) / np.maximum(np.asarray(history[-2], float), 1e-12)
    z = ratio / temperature
    e = np.exp(z - z.max())
    return n_tasks * e / e.sum()


def chebyshev(losses, r, ideal=None, mu: float = 0.0):
    """Weighted Chebyshev value and active weights.

    mu = 0 is the hard max of r_k (L_k - z_k) with ties split uniformly;
    mu > 0 is the smooth (1/mu)·logsumexp(mu·r(L - z)) whose active weights
    are the internal softmax.
    """
    losses, r = np.asarray(losses, float), np.asarray(r, float)
    ideal = np.zeros_like(losses) if ideal is None else np.asarray(ideal, float)
    gap = r * (losses - ideal)
    active = chebyshev_active(gap, mu)
    value = float(gap.max()) if mu <= 0 else float(logsumexp(mu * gap) / mu)
    return value, active
