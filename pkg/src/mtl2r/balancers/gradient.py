"""Gradient-manipulation rules: each maps a (K, m) gradient matrix G to an
update direction d in parameter space."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .simplex import EPS, min_norm_weights, project_simplex


def log_transform(G, losses) -> np.ndarray:
    """Rows g_k / L_k, the gradients of log L_k."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses <= 0):
        raise ValueError("log_transform needs strictly positive losses")
    return np.asarray(G, dtype=np.float64) / losses[:, None]


def pcgrad_project(G, rng: np.random.Generator):
    """Projected task gradients plus, per task, the index of the last task
    it was projected against (-1 if no projection fired)."""
    G = np.asarray(G, dtype=np.float64)
    K = G.shape[0]
    sq = np.einsum("ij,ij->i", G, G)
    out = G.copy()
    last = np.full(K, -1)
    for i in rng.permutation(K):
        for j in rng.permutation(K):
            if j == i or sq[j] <= EPS:
                continue
            dot = out[i] @ G[j]
            if dot < 0:
                out[i] -= dot / sq[j] * G[j]
                last[i] = j
    return out, last


def pcgrad(G, rng: np.random.Generator) -> np.ndarray:
    projected, _ = pcgrad_project(G, rng)
    return projected.mean(axis=0)


def cagrad_weights(G, c: float, steps: int = 200, lr: float = 0.05) -> np.ndarray:
    """Simplex w minimising g_wᵀg0 + c·||g0||·||g_w||.

    The minimiser does not change when G is rescaled, so projected gradient
    descent runs on G divided by its largest row norm. Each step starts at
    ``lr`` and grows or backtracks (Armijo on the projection arc), and
    ``steps`` is a budget per 200-step round; rounds repeat up to 10 times
    until a round no longer improves F by 1e-12.
    """
    G = np.asarray(G, dtype=np.float64)
    K = G.shape[0]
    scale = np.max(np.linalg.norm(G, axis=1))
    w = np.full(K, 1.0 / K)
    if scale <= EPS:
        return w
    Gn = G / scale
    M = Gn @ Gn.T
    b = M.mean(axis=1)  # G g0
    root_phi = c * np.sqrt(max(b.mean(), 0.0))

    def f(v):
        return v @ b + root_phi * np.sqrt(max(v @ M @ v, 0.0))

    fw, t = f(w), lr
    for _ in range(10):
        start = fw
        for _ in range(steps):
            Mw = M @ w
            norm = np.sqrt(max(w @ Mw, 0.0))
            grad = b + (root_phi * Mw / norm if norm > EPS else 0.0)
            t *= 2.0
            while True:
                nxt = project_simplex(w - t * grad)
                fn = f(nxt)
                if fn <= fw + grad @ (nxt - w) + 0.5 / t * np.sum((nxt - w) ** 2) \
                        or t < 1e-12:
                    break
                t *= 0.5
            if fn >= fw:
                break
            w, fw = nxt, fn
        if start - fw <= 1e-12:
            break
    return w


def cagrad_objective(G, c: float, w) -> float:
    G = np.asarray(G, dtype=np.float64)
    g0 = G.mean(axis=0)
    gw = np.asarray(w) @ G
    return float(gw @ g0 + c * np.linalg.norm(g0) * np.linalg.norm(gw))


def cagrad(G, c: float = 0.4, steps: int = 200, lr: float = 0.05) -> np.ndarray:
    if not 0.0 <= c < 1.0:
        raise ValueError(f"cagrad: c must be in [0, 1), got {c}")
    G = np.asarray(G, dtype=np.float64)
    g0 = G.mean(axis=0)
    root_phi = c * np.linalg.norm(g0)
    if root_phi == 0.0:
        return g0
    gw = cagrad_weights(G, c, steps, lr) @ G
    norm = np.linalg.norm(gw)
    if norm <= EPS:
        return g0
    return g0 + root_phi / norm * gw


def imtl_weights(G) -> tuple[np.ndarray, bool]:
    """α summing to one with equal projections of Gᵀα on every unit task
    gradient. Returns (α, singular); singular systems fall back to uniform.
    α sums to -1 instead when that is what makes the projections positive."""
    G = np.asarray(G, dtype=np.float64)
    K = G.shape[0]
    norms = np.linalg.norm(G, axis=1)
    if np.any(norms <= EPS):
        raise ValueError("imtl: every task gradient must be nonzero")
    U = G / norms[:, None]
    D = G[0] - G[1:]
    Ud = U[0] - U[1:]
    A = Ud @ D.T
    # unit-vector differences are O(1), so the smallest singular value is
    # compared against the scale of D (a 1x1 system always has cond 1)
    if np.linalg.svd(A, compute_uv=False)[-1] <= 1e-10 * max(np.linalg.norm(D), EPS):
        return np.full(K, 1.0 / K), True
    tail = np.linalg.solve(A, Ud @ G[0])
    alpha = np.concatenate([[1.0 - tail.sum()], tail])
    # a negative common projection would ascend every task
    if (alpha @ G) @ U[0] < 0:
        alpha = -alpha
    return alpha, False


def imtl_g(G) -> np.ndarray:
    alpha, _ = imtl_weights(G)
    return alpha @ np.asarray(G, dtype=np.float64)


def nash_weights(G, max_iters: int = 100, w0: Optional[np.ndarray] = None,
                 ridge: float = 1e-8, damping: float = 0.5, tol: float = 1e-9) -> np.ndarray:
    """Nonnegative w with w_k·(GGᵀw)_k = 1 for every task.

    First the damped fixed-point iteration w ← (1-a)·w + a / max(ε, GGᵀw).
    It only contracts when the normalised Gram matrix has spectrum below 3,
    so strongly conflicting gradients can make it oscillate or blow up. The
    condition is also the stationarity condition of the strictly convex
    ½wᵀMw - Σ log w_k, and damped Newton on that objective finishes the
    solve whenever the residual is still above ``tol``. Both stages commute
    with per-task rescaling of G.
    """
    G = np.asarray(G, dtype=np.float64)
    M = G @ G.T + ridge * np.eye(G.shape[0])
    start = 1.0 / np.sqrt(np.diag(M)) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    w = start
    for _ in range(max_iters):
        w = (1.0 - damping) * w + damping / np.maximum(EPS, M @ w)
        if np.any(w > 1e8) or not np.all(np.isfinite(w)):
            w = start
            break
    if np.max(np.abs(w * (M @ w) - 1.0)) > tol:
        w = _nash_newton(M, w, tol)
    if np.any(w > 1e8) or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise FloatingPointError("nash_weights: no positive bargaining solution found")
    return w


def _nash_newton(M: np.ndarray, w: np.ndarray, tol: float, max_iter: int = 100) -> np.ndarray:
    def f(v):
        return 0.5 * v @ M @ v - np.sum(np.log(v))

    for _ in range(max_iter):
        Mw = M @ w
        if np.max(np.abs(w * Mw - 1.0)) <= tol:
            break
        g = Mw - 1.0 / w
        step = np.linalg.solve(M + np.diag(1.0 / (w * w)), -g)
        t = 1.0
        # stay strictly positive, then backtrack (Armijo)
        neg = step < 0
        if np.any(neg):
            t = min(1.0, 0.99 * np.min(-w[neg] / step[neg]))
        fw, slope = f(w), g @ step
        while f(w + t * step) > fw + 1e-4 * t * slope and t > 1e-12:
            t *= 0.5
        w = w + t * step
    return w


def nash_residual(G, w) -> float:
    G = np.asarray(G, dtype=np.float64)
    return float(np.max(np.abs(w * (G @ (G.T @ w)) - 1.0)))


def sdmgrad_weights(G, lam: float, inner_iters: int = 500,
                    w0: Optional[np.ndarray] = None) -> np.ndarray:
    """Simplex w minimising ||Gᵀw + λ g0||² by accelerated projected
    gradient (step 1/Lipschitz, momentum restarted whenever the objective
    rises)."""
    G = np.asarray(G, dtype=np.float64)
    K = G.shape[0]
    M = G @ G.T
    b = lam * M.mean(axis=1)  # G (λ g0)
    lip = 2.0 * np.linalg.eigvalsh(M)[-1]
    w = np.full(K, 1.0 / K) if w0 is None else project_simplex(w0)
    if lip <= EPS:
        return w

    def f(v):
        return v @ M @ v + 2.0 * v @ b

    y, t, fw = w.copy(), 1.0, f(w)
    for _ in range(inner_iters):
        nxt = project_simplex(y - 2.0 * (M @ y + b) / lip)
        fn = f(nxt)
        if fn > fw:
            y, t = w.copy(), 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + (t - 1.0) / t_next * (nxt - w)
        w, fw, t = nxt, fn, t_next
    return w


def sdmgrad(G, lam: float = 0.3, inner_iters: int = 500) -> np.ndarray:
    """(Gᵀw + λ g0) / (1 + λ) with w minimising ||Gᵀw + λ g0||² on the simplex."""
    if lam < 0:
        raise ValueError("sdmgrad: lambda must be >= 0")
    G = np.asarray(G, dtype=np.float64)
    w = sdmgrad_weights(G, lam, inner_iters)
    return (w @ G + lam * G.mean(axis=0)) / (1.0 + lam)


def graddrop(G, rng: np.random.Generator) -> np.ndarray:
    """Per coordinate keep only the positive or only the negative entries,
    choosing positive with probability 0.5·(1 + Σ G / Σ |G|)."""
    G = np.asarray(G, dtype=np.float64)
    total = G.sum(axis=0)
    mag = np.abs(G).sum(axis=0)
    purity = 0.5 * (1.0 + np.divide(total, mag, out=np.zeros_like(total), where=mag > 0))
    keep_pos = rng.random(G.shape[1]) < purity
    pos = np.where(G > 0, G, 0.0).sum(axis=0)
    neg = np.where(G < 0, G, 0.0).sum(axis=0)
    return np.where(keep_pos, pos, neg)


def chebyshev_active(weighted_gap: np.ndarray, mu: float) -> np.ndarray:
    if mu <= 0:
        top = weighted_gap == weighted_gap.max()
        return top / top.sum()
    z = mu * (weighted_gap - weighted_gap.max())
    e = np.exp(z)
    return e / e.sum()


def wc_mgda_weights(G, losses, r, ideal, mu: float = 50.0, prune: float = 0.1):
    """Coefficients on the original gradients for an MGDA step on the
    Chebyshev-active objectives. Returns (coefficients, activity a).

    a is the soft-Chebyshev activity. Objectives with a_k >= ``prune``·max(a)
    form the active set; the min-norm point is taken over rows ā·r_k·g_k,
    ā the mean activity of the set. One shared scale keeps the hull's shape:
    scaling rows by their own a_k lets a barely active objective become the
    shortest row and pin the step near zero.
    """
    G = np.asarray(G, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    a = chebyshev_active(r * (np.asarray(losses) - np.asarray(ideal)), mu)
    active = np.flatnonzero(a >= prune * a.max())
    scaled = a[active].mean() * r[active]
    lam = min_norm_weights(scaled[:, None] * G[active])
    coef = np.zeros(G.shape[0])
    coef[active] = lam * scaled
    return coef, a


def wc_mgda_direction(G, losses, r, ideal, mu: float = 50.0) -> np.ndarray:
    coef, _ = wc_mgda_weights(G, losses, r, ideal, mu)
    return coef @ np.asarray(G, dtype=np.float64)


def epo_weights(G, losses, r, eps: float = 1e-3) -> tuple[np.ndarray, str]:
    """Simplex β for an exact-Pareto-optimal step toward the ray r.

    Balance mode (non-uniformity above ``eps``) solves the LP
        max βᵀ C a  s.t. β in simplex, (Cβ)_j >= rhs_j
    with C = GGᵀ and a the anchor (gradient of the non-uniformity with
    respect to the losses). The worst weighted loss must not ascend
    (rhs = 0); tasks the anchor wants to ascend are unconstrained; the rest
    may not ascend faster than the anchor direction itself. Descent mode
    uses the min-norm weights. Returns (β, mode).
    """
    G = np.asarray(G, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(losses <= 0) or np.any(r <= 0):
        raise ValueError("epo: losses and preference must be strictly positive")
    K = G.shape[0]
    rl = r * losses
    p = rl / rl.sum()
    nu = float(np.sum(p * np.log(K * p)))
    if nu <= eps:
        return min_norm_weights(G), "descent"
    C = G @ G.T
    a = r * (np.log(K * p) - nu)
    Ca = C @ a
    rhs = Ca.copy()
    rhs[Ca > 0] = -np.inf
    rhs[rl == rl.max()] = 0.0
    rows = np.isfinite(rhs)
    res = linprog(-Ca, A_ub=-C[rows], b_ub=-rhs[rows],
                  A_eq=np.ones((1, K)), b_eq=[1.0], bounds=[(0, None)] * K, method="highs")
    if res.status != 0:
        return min_norm_weights(G), "fallback"
    beta = np.maximum(res.x, 0.0)
    return beta / beta.sum(), "balance"


def epo_direction(G, losses, r, eps: float = 1e-3) -> np.ndarray:
    beta, _ = epo_weights(G, losses, r, eps)
    return beta @ np.asarray(G, dtype=np.float64)


def ec_update(losses, primary: int, bounds, multipliers, rho: float = 1.0):
    """Augmented-Lagrangian multiplier step for min L_primary s.t. L_k <= eps_k.

    Returns (coefficients on the task gradients, new multipliers)."""
    losses = np.asarray(losses, dtype=np.float64)
    lam = np.maximum(0.0, np.asarray(multipliers, dtype=np.float64)
                     + rho * (losses - np.asarray(bounds, dtype=np.float64)))
    lam[primary] = 0.0
    coef = lam.copy()
    coef[primary] = 1.0
    return coef, lam


def ec_direction(G, losses, primary: int, bounds, multipliers, rho: float = 1.0):
    coef, lam = ec_update(losses, primary, bounds, multipliers, rho)
    return coef @ np.asarray(G, dtype=np.float64), lam
