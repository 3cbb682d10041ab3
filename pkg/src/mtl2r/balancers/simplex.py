"""Small solvers over the probability simplex."""

from __future__ import annotations

import numpy as np

EPS = 1e-12


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def min_norm_weights(G, tol: float = 1e-7, max_iter: int = 250) -> np.ndarray:
    """Weights w on the simplex minimising ||Gᵀw||².

    Frank-Wolfe with pairwise (away) steps: each iteration takes the vertex
    t = argmin_k g_k·(Gᵀw), the support vertex s = argmax_k g_k·(Gᵀw), and
    moves weight from s to t with an exact line search. Stops once the
    duality gap (Gᵀw - g_t)·Gᵀw is at most ``tol``. If the gap is still
    open after ``max_iter`` steps (near-stationary hulls where FW crawls),
    Wolfe's active-set method finishes the solve exactly.
    """
    G = np.asarray(G, dtype=np.float64)
    K = G.shape[0]
    w = np.full(K, 1.0 / K)
    if not np.any(G):
        return w
    M = G @ G.T
    for _ in range(max_iter):
        Mw = M @ w
        t = int(np.argmin(Mw))
        if float(w @ Mw) - Mw[t] <= tol:
            return w
        support = np.flatnonzero(w > 0)
        s = int(support[np.argmax(Mw[support])])
        denom = M[s, s] - 2.0 * M[s, t] + M[t, t]
        gamma = w[s] if denom <= EPS else min(max((Mw[s] - Mw[t]) / denom, 0.0), w[s])
        w[s] -= gamma
        w[t] += gamma
    v = _wolfe(M, tol)
    return v if v @ M @ v < w @ M @ w else w


def _affine_min(M: np.ndarray, S: np.ndarray) -> np.ndarray:
    r = S.size
    A = np.zeros((r + 1, r + 1))
    A[:r, :r] = M[np.ix_(S, S)]
    A[:r, r] = A[r, :r] = 1.0
    rhs = np.zeros(r + 1)
    rhs[r] = 1.0
    return np.linalg.lstsq(A, rhs, rcond=None)[0][:r]


def _wolfe(M: np.ndarray, tol: float, max_iter: int = 500) -> np.ndarray:
    """Wolfe's min-norm-point algorithm on the Gram matrix M."""
    K = M.shape[0]
    w = np.zeros(K)
    w[int(np.argmin(np.diag(M)))] = 1.0
    S = [int(np.argmin(np.diag(M)))]
    for _ in range(max_iter):
        Mw = M @ w
        t = int(np.argmin(Mw))
        if float(w @ Mw) - Mw[t] <= tol or t in S:
            break
        S.append(t)
        while True:
            idx = np.array(S)
            v = _affine_min(M, idx)
            if np.all(v > EPS):
                w = np.zeros(K)
                w[idx] = v
                break
            cur = w[idx]
            neg = v <= EPS
            theta = np.min(cur[neg] / (cur[neg] - v[neg]))
            cur = cur + theta * (v - cur)
            keep = cur > EPS
            w = np.zeros(K)
            w[idx[keep]] = cur[keep]
            w /= w.sum()
            S = [int(i) for i in idx[keep]]
    return w
