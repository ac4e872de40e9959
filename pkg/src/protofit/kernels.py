"""Hot numeric kernels: numba-compiled fast path with a pure-numpy fallback.

The backend is picked once at import time. Set ``PROTOFIT_BACKEND=numpy`` to
force the fallback (or ``numba`` to insist on the compiled path and fail if
numba is unavailable). ``benchmarks/bench_kernels.py`` times the two side by
side. Both paths are serial and deterministic; they agree to float64
round-off, not bit-for-bit.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "PROTOFIT_BACKEND"


def _pick_backend() -> str:
    requested = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if requested in ("numpy", "np"):
        return "numpy"
    if requested in ("auto", "", "numba"):
        try:
            import numba  # noqa: F401

            return "numba"
        except ImportError:
            if requested == "numba":
                raise RuntimeError(f"{_ENV_VAR}=numba requested but numba is not importable")
            return "numpy"
    raise RuntimeError(f"unrecognized {_ENV_VAR}={requested!r} (use numba or numpy)")


BACKEND = _pick_backend()


# -- pure numpy implementations ---------------------------------------------


def sq_dists_np(X, P):
    """Squared L2 distances, shape (B, K)."""
    diff = X[:, None, :] - P[None, :, :]
    return np.einsum("bkd,bkd->bk", diff, diff)


def gaussian_importance_np(X, P, sigma):
    """Normalized isotropic Gaussian responsibilities of each prototype.

    Log densities -d2/(2*sigma^2) - D*log(sigma) are normalized per row with
    the usual max-shift, so squared distances up to 1e6 stay finite.
    Returns (d2, z) with z rows summing to 1.
    """
    d2 = sq_dists_np(X, P)
    dim = X.shape[1]
    a = -d2 / (2.0 * sigma**2) - dim * np.log(sigma)
    a -= a.max(axis=1, keepdims=True)
    z = np.exp(a)
    z /= z.sum(axis=1, keepdims=True)
    return d2, z


def backprop_importance_np(X, P, sigma, d2, t):
    """Push dL/da (a = per-prototype log density) onto p_k, log sigma_k and x.

    Returns (grad_p, grad_logvar, grad_x).
    """
    dim = X.shape[1]
    w = t / sigma**2
    grad_p = w.T @ X - w.sum(axis=0)[:, None] * P
    grad_lv = (t * (d2 / sigma**2 - dim)).sum(axis=0)
    grad_x = w @ P - w.sum(axis=1)[:, None] * X
    return grad_p, grad_lv, grad_x


def pairwise_hinge_np(P, lam):
    """Sum over prototype pairs of max(0, lam - ||p_j - p_k||)^2 plus gradient.

    Coincident prototypes contribute lam^2 to the value but zero gradient
    (the direction is undefined); pairs exactly at distance lam contribute
    nothing (subgradient 0 at the hinge boundary).
    """
    K = P.shape[0]
    if K < 2:
        return 0.0, np.zeros_like(P)
    diff = P[:, None, :] - P[None, :, :]
    pd = np.sqrt(np.einsum("jkd,jkd->jk", diff, diff))
    np.fill_diagonal(pd, np.inf)
    hinge = np.where(pd < lam, lam - pd, 0.0)
    value = 0.5 * float((hinge**2).sum())
    coef = np.where((pd > 0.0) & (pd < lam), -2.0 * hinge / np.where(pd > 0, pd, 1.0), 0.0)
    grad = coef.sum(axis=1)[:, None] * P - coef @ P
    return value, grad


# -- numba implementations ---------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _sq_dists_nb(X, P):
        B, D = X.shape
        K = P.shape[0]
        out = np.empty((B, K))
        for i in range(B):
            for k in range(K):
                s = 0.0
                for d in range(D):
                    t = X[i, d] - P[k, d]
                    s += t * t
                out[i, k] = s
        return out

    @njit(cache=True)
    def _gaussian_importance_nb(X, P, sigma):
        B, D = X.shape
        K = P.shape[0]
        d2 = np.empty((B, K))
        z = np.empty((B, K))
        log_sigma = np.log(sigma)
        for i in range(B):
            amax = -np.inf
            for k in range(K):
                s = 0.0
                for d in range(D):
                    t = X[i, d] - P[k, d]
                    s += t * t
                d2[i, k] = s
                a = -s / (2.0 * sigma[k] * sigma[k]) - D * log_sigma[k]
                z[i, k] = a
                if a > amax:
                    amax = a
            total = 0.0
            for k in range(K):
                e = np.exp(z[i, k] - amax)
                z[i, k] = e
                total += e
            inv = 1.0 / total
            for k in range(K):
                z[i, k] *= inv
        return d2, z

    @njit(cache=True)
    def _backprop_importance_nb(X, P, sigma, d2, t):
        B, D = X.shape
        K = P.shape[0]
        grad_p = np.zeros((K, D))
        grad_lv = np.zeros(K)
        grad_x = np.zeros((B, D))
        for i in range(B):
            for k in range(K):
                inv = 1.0 / (sigma[k] * sigma[k])
                w = t[i, k] * inv
                for d in range(D):
                    diff = X[i, d] - P[k, d]
                    grad_p[k, d] += w * diff
                    grad_x[i, d] -= w * diff
                grad_lv[k] += t[i, k] * (d2[i, k] * inv - D)
        return grad_p, grad_lv, grad_x

    @njit(cache=True)
    def _pairwise_hinge_nb(P, lam):
        K, D = P.shape
        value = 0.0
        grad = np.zeros((K, D))
        for j in range(K):
            for k in range(j + 1, K):
                s = 0.0
                for d in range(D):
                    t = P[j, d] - P[k, d]
                    s += t * t
                dist = np.sqrt(s)
                if dist < lam:
                    h = lam - dist
                    value += h * h
                    if dist > 0.0:
                        c = -2.0 * h / dist
                        for d in range(D):
                            g = c * (P[j, d] - P[k, d])
                            grad[j, d] += g
                            grad[k, d] -= g
        return value, grad

    def sq_dists_numba(X, P):
        return _sq_dists_nb(np.ascontiguousarray(X), np.ascontiguousarray(P))

    def gaussian_importance_numba(X, P, sigma):
        return _gaussian_importance_nb(
            np.ascontiguousarray(X), np.ascontiguousarray(P), np.ascontiguousarray(sigma)
        )

    def backprop_importance_numba(X, P, sigma, d2, t):
        return _backprop_importance_nb(
            np.ascontiguousarray(X),
            np.ascontiguousarray(P),
            np.ascontiguousarray(sigma),
            np.ascontiguousarray(d2),
            np.ascontiguousarray(t),
        )

    def pairwise_hinge_numba(P, lam):
        value, grad = _pairwise_hinge_nb(np.ascontiguousarray(P), float(lam))
        return float(value), grad

    sq_dists = sq_dists_numba
    gaussian_importance = gaussian_importance_numba
    backprop_importance = backprop_importance_numba
    pairwise_hinge = pairwise_hinge_numba
else:
    sq_dists = sq_dists_np
    gaussian_importance = gaussian_importance_np
    backprop_importance = backprop_importance_np
    pairwise_hinge = pairwise_hinge_np


def backend() -> str:
    return BACKEND
