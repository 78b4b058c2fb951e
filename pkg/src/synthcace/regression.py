"""Least squares and logistic regression.

The public functions fit a single model. The ``*_batch`` kernels fit the same
model under a stack of frequency weights ``W`` of shape ``(B, n)``; row ``b``
of ``W`` reproduces exactly the fit on a dataset in which row ``i`` appears
``W[b, i]`` times. Bootstrap replicates and subgroup fits (0/1 weights) both
go through these kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import AllSameResponse, DimensionMismatch, RankDeficient

RANK_RTOL = 1e-10
PROB_CLIP = 1e-6
# |linear predictor| beyond this on a weighted row means the data are separated
SEPARATION_ETA = 30.0


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    names: tuple[str, ...] = ()


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int


def _qr_solve(A: np.ndarray, b: np.ndarray):
    """Least squares for stacked systems ``A[i] @ c = b[i]``.

    Returns ``(coef, ok)``; ``coef`` is NaN wherever the design is rank
    deficient at relative tolerance ``RANK_RTOL``.
    """
    B, rows, p = A.shape
    if p == 0:
        return np.zeros((B, 0)), np.ones(B, bool)
    if rows < p:
        return np.full((B, p), np.nan), np.zeros(B, bool)
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    scale = diag.max(axis=1)
    ok = (scale > 0) & (diag.min(axis=1) > RANK_RTOL * scale)
    qtb = np.matmul(Q.transpose(0, 2, 1), b[:, :, None])[:, :, 0]
    eye = np.eye(p)
    R_safe = np.where(ok[:, None, None], R, eye)
    coef = np.linalg.solve(R_safe, qtb[:, :, None])[:, :, 0]
    coef[~ok] = np.nan
    return coef, ok


def wls_batch(X: np.ndarray, y: np.ndarray, W: np.ndarray):
    """Frequency-weighted least squares under every weight row of ``W``.

    ``X`` is ``(n, p)`` or ``(B, n, p)``; ``y`` is ``(n,)`` or ``(B, n)``.
    """
    nz = W > 0
    m = max(int(nz.sum(axis=1).max()), X.shape[-1])
    if m < 0.9 * W.shape[1]:
        # zero-weight rows contribute nothing: gather the weighted rows first
        idx = np.argsort(~nz, axis=1, kind="stable")[:, :m]
        W = np.take_along_axis(W, idx, axis=1)
        X = X[idx] if X.ndim == 2 else np.take_along_axis(X, idx[:, :, None], axis=1)
        y = y[idx] if y.ndim == 1 else np.take_along_axis(y, idx, axis=1)
    sw = np.sqrt(W)
    A = sw[:, :, None] * X
    b = sw * y
    return _qr_solve(A, b)


def ols(design, response) -> LinearFit:
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"design {X.shape} vs response {y.shape}")
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(f"{X.shape[0]} rows < {X.shape[1]} columns")
    coef, ok = _qr_solve(X[None], y[None])
    if not ok[0]:
        raise RankDeficient("design matrix does not have full column rank")
    return LinearFit(coef[0], y - X @ coef[0])


def _newton_step(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, g[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(h, gi, rcond=None)[0] for h, gi in zip(H, g)])


def logistic_batch(X: np.ndarray, y: np.ndarray, W: np.ndarray, max_iter: int = 100, tol: float = 1e-8):
    """IRLS (Newton-Raphson) fit of a logistic model for every weight row.

    Returns ``(coef, converged, iterations)``. A weight row whose data are
    separated stops at the last iterate before the linear predictor runs off
    and is reported as not converged.
    """
    B = W.shape[0]
    p = X.shape[1]
    beta = np.zeros((B, p))
    prev = beta.copy()
    converged = np.zeros(B, bool)
    active = np.ones(B, bool)
    iters = np.zeros(B, int)
    support = W > 0
    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        b = beta[idx]
        w = W[idx]
        eta = b @ X.T
        if it > 0:
            runaway = (np.abs(eta) * support[idx]).max(axis=1) > SEPARATION_ETA
            if runaway.any():
                beta[idx[runaway]] = prev[idx[runaway]]
                active[idx[runaway]] = False
                keep = ~runaway
                idx, b, w, eta = idx[keep], b[keep], w[keep], eta[keep]
                if idx.size == 0:
                    break
        mu = expit(eta)
        grad = (w * (y - mu)) @ X
        done = np.abs(grad).max(axis=1) < tol
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == max_iter:
            break
        todo = ~done
        idx, b, w, mu, grad = idx[todo], b[todo], w[todo], mu[todo], grad[todo]
        if idx.size == 0:
            break
        prev[idx] = b
        H = np.matmul((w * mu * (1 - mu))[:, None, :] * X.T[None], X)
        beta[idx] = b + _newton_step(H, grad)
        iters[idx] += 1
    return beta, converged, iters


def logistic(design, response, max_iter: int = 100, tol: float = 1e-8) -> LogisticFit:
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"design {X.shape} vs response {y.shape}")
    if np.all(y == y[0]):
        raise AllSameResponse(f"response is constant ({y[0]:g}); score model undefined")
    coef, conv, iters = logistic_batch(X, y, np.ones((1, len(y))), max_iter, tol)
    return LogisticFit(coef[0], bool(conv[0]), int(iters[0]))


def clip_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLIP, 1 - PROB_CLIP)


def predict_prob(fit: LogisticFit, design) -> np.ndarray:
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(fit.coefficients):
        raise DimensionMismatch(f"design has {X.shape[-1]} columns, fit has {len(fit.coefficients)}")
    return clip_prob(expit(X @ fit.coefficients))
