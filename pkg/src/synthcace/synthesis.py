"""Minimum-MSE convex combination of candidate estimators.

Given the sampling covariance of (reference, candidates) and an estimate of
the candidate biases, the MSE of ``(1 - 1'b) theta0 + b' theta1`` is the
quadratic ``V0 - 2 P'b + b'(T + D) b``. The weights minimise it over
``{b : b >= 0, 1'b <= 1}``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import DimensionMismatch, NumericalFailure
from .estimators import CandidateEstimates, EstimatorSpec, estimate_all
from .resample import SamplingMoments, split

FEAS_TOL = 1e-12
VARIANTS = ("raw", "shrunk", "split")


@dataclass(frozen=True)
class DerivedMatrices:
    p_vec: np.ndarray
    t_mat: np.ndarray
    d_vec: np.ndarray
    d_mat: np.ndarray

    @property
    def k(self) -> int:
        return len(self.p_vec)


@dataclass(frozen=True)
class WeightSolution:
    b1: np.ndarray
    b0: float
    objective: float
    on_boundary: bool
    active_constraints: tuple[int, ...] = ()  # j < k: b_j = 0; k: 1'b = 1
    ridge: float = 0.0


@dataclass(frozen=True)
class SynthesisResult:
    estimate: float
    weights: WeightSolution
    variant: str
    estimates: CandidateEstimates
    moments: SamplingMoments
    bias: np.ndarray
    extra: dict = field(default_factory=dict)


def derive_matrices(moments: SamplingMoments, d_vec) -> DerivedMatrices:
    d = np.asarray(d_vec, dtype=float).reshape(-1)
    k = moments.k
    if len(d) != k:
        raise DimensionMismatch(f"bias vector has length {len(d)}, expected {k}")
    one = np.ones(k)
    C = moments.c_vec
    P = moments.v0 * one - C
    T = moments.v0 * np.outer(one, one) - np.outer(one, C) - np.outer(C, one) + moments.v_mat
    T = (T + T.T) / 2
    return DerivedMatrices(P, T, d, np.outer(d, d))


def mse_objective(b1, dm: DerivedMatrices, v0: float) -> float:
    b = np.asarray(b1, dtype=float)
    return float(v0 - 2 * dm.p_vec @ b + b @ (dm.t_mat + dm.d_mat) @ b)


def mse_objective_expanded(b1, moments: SamplingMoments, d_vec) -> float:
    """The same MSE written term by term from the covariance blocks."""
    b = np.asarray(b1, dtype=float)
    w0 = 1 - b.sum()
    return float(
        w0**2 * moments.v0 + b @ moments.v_mat @ b + 2 * w0 * moments.c_vec @ b + (b @ np.asarray(d_vec)) ** 2
    )


def combine(theta0: float, theta1, b1) -> float:
    b = np.asarray(b1, dtype=float)
    return float((1 - b.sum()) * theta0 + b @ np.asarray(theta1, dtype=float))


def _active_sets(k: int):
    """Every subset of the k+1 constraints except 'all b_j = 0 and 1'b = 1'."""
    for r in range(k + 2):
        for A in itertools.combinations(range(k + 1), r):
            if len(A) == k + 1:
                continue
            yield A


def _set_masks(k: int):
    """Row masks for every active set: row j < k is replaced when b_j is fixed
    at zero, row k when the sum constraint is inactive."""
    if k not in _MASK_CACHE:
        sets = list(_active_sets(k))
        mask = np.zeros((len(sets), k + 1), bool)
        for i, A in enumerate(sets):
            mask[i, list(j for j in A if j < k)] = True
            mask[i, k] = k not in A
        _MASK_CACHE[k] = (sets, mask)
    return _MASK_CACHE[k]


_MASK_CACHE: dict = {}


def _kkt_systems(M: np.ndarray, P: np.ndarray, mask: np.ndarray):
    """Stack the (k+1)x(k+1) KKT system of each active set.

    Unknowns are (b, mu). A fixed b_j gets the row e_j; an inactive sum
    constraint gets the row e_k, forcing mu = 0.
    """
    k = len(P)
    base = np.zeros((k + 1, k + 1))
    base[:k, :k] = 2 * M
    base[:k, k] = 1.0
    base[k, :k] = 1.0
    rhs0 = np.concatenate([2 * P, [1.0]])
    mats = np.where(mask[:, :, None], np.eye(k + 1)[None], base[None])
    rhs = np.where(mask, 0.0, rhs0[None])
    return mats, rhs


def solve_weights(dm: DerivedMatrices, v0: float, ridge: float | None = None) -> WeightSolution:
    """Exact minimiser of the MSE quadratic over the feasible weight set.

    The unconstrained solution ``(T + D)^-1 P`` is returned when feasible.
    Otherwise every active set of the k+1 linear constraints is solved as an
    equality-constrained problem and the best feasible point is kept (ties go
    to the smallest total weight on the candidates). A ridge of
    ``1e-10 * trace(T + D) / k`` is added only if ``T + D`` is numerically
    singular, unless ``ridge`` is given explicitly.
    """
    k = dm.k
    M = dm.t_mat + dm.d_mat
    M = (M + M.T) / 2
    P = dm.p_vec
    if ridge is None:
        ridge = 0.0
        if np.linalg.matrix_rank(M) < k:
            tr = np.trace(M) / k
            ridge = 1e-10 * tr if tr > 0 else 1e-10
    Mr = M + ridge * np.eye(k)

    def objective(b):
        return v0 - 2 * b @ P + np.einsum("...i,ij,...j->...", b, M, b)

    try:
        b = np.linalg.solve(Mr, P)
    except np.linalg.LinAlgError:
        b = None
    if b is not None and np.all(b >= 0) and b.sum() <= 1:
        return WeightSolution(b, float(1 - b.sum()), float(objective(b)), False, (), ridge)

    sets, mask = _set_masks(k)
    mats, rhs = _kkt_systems(Mr, P, mask)
    try:
        sol = np.linalg.solve(mats, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        sol = np.full((len(sets), k + 1), np.nan)
        for i in range(len(sets)):
            try:
                sol[i] = np.linalg.solve(mats[i], rhs[i])
            except np.linalg.LinAlgError:
                pass
    bs = sol[:, :k]
    ok = np.isfinite(bs).all(axis=1)
    ok &= (bs >= -FEAS_TOL).all(axis=1) & (bs.sum(axis=1) <= 1 + FEAS_TOL)
    if not ok.any():
        raise NumericalFailure("no active set produced a feasible solution")
    idx = np.flatnonzero(ok)
    cand = np.clip(bs[idx], 0.0, None)
    s = cand.sum(axis=1)
    cand[s > 1] /= s[s > 1, None]
    obj = objective(cand)
    best = obj.min()
    tie = obj <= best + 1e-14 * (1 + abs(best))
    l1 = np.where(tie, cand.sum(axis=1), np.inf)
    i = int(np.argmin(l1))
    b = cand[i]
    return WeightSolution(b, float(1 - b.sum()), float(obj[i]), True, tuple(sets[idx[i]]), ridge)


def bias_raw(est: CandidateEstimates) -> np.ndarray:
    return np.asarray(est.theta1, dtype=float) - est.theta0


def shrink_weights(delta, moments: SamplingMoments) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    var = moments.v0 + np.diag(moments.v_mat) - 2 * moments.c_vec
    den = var + delta**2
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(den > 0, delta**2 / den, 0.0)
    return w


def bias_shrunk(est: CandidateEstimates, moments: SamplingMoments) -> np.ndarray:
    """Raw differences shrunk toward zero by ``delta^2 / (var(delta) + delta^2)``."""
    delta = bias_raw(est)
    return shrink_weights(delta, moments) * delta


def align(est: CandidateEstimates, moments: SamplingMoments):
    """Restrict estimates and moments to the candidates both know about."""
    if est.ids == moments.ids or (not moments.ids and moments.k == est.k):
        return est, moments
    ids = tuple(i for i in est.ids if i in moments.ids)
    if not ids:
        raise DimensionMismatch("estimates and moments share no candidates")
    pos = [est.ids.index(i) for i in ids]
    est2 = CandidateEstimates(est.theta0, est.theta1[pos], ids, est.reference, est.dropped)
    return est2, moments.subset(ids)


def synthesize(est: CandidateEstimates, moments: SamplingMoments, variant: str = "raw") -> SynthesisResult:
    est, moments = align(est, moments)
    if variant == "raw":
        d = bias_raw(est)
    elif variant == "shrunk":
        d = bias_shrunk(est, moments)
    else:
        raise ValueError(f"variant must be 'raw' or 'shrunk' here, got {variant!r}")
    dm = derive_matrices(moments, d)
    sol = solve_weights(dm, moments.v0)
    return SynthesisResult(combine(est.theta0, est.theta1, sol.b1), sol, variant, est, moments, d)


def synthesize_split(
    dataset: Dataset,
    registry: Sequence[EstimatorSpec],
    moments: SamplingMoments,
    seed: int,
) -> SynthesisResult:
    """Cross-fitted combination: weights built from the bias estimate of one
    half are applied to the candidates of the other half, and the two
    combinations are averaged. The full-sample moments serve both halves."""
    pair = split(dataset, seed)
    est_a = estimate_all(pair.half_a, registry)
    est_b = estimate_all(pair.half_b, registry)
    return split_combination(est_a, est_b, moments)


def split_combination(est_a: CandidateEstimates, est_b: CandidateEstimates, moments: SamplingMoments) -> SynthesisResult:
    ids = tuple(i for i in moments.ids if i in est_a.ids and i in est_b.ids)
    if not ids:
        raise DimensionMismatch("halves and moments share no candidates")
    m = moments.subset(ids)

    def restrict(e):
        pos = [e.ids.index(i) for i in ids]
        return CandidateEstimates(e.theta0, e.theta1[pos], ids, e.reference, e.dropped)

    est_a, est_b = restrict(est_a), restrict(est_b)
    d_a, d_b = bias_raw(est_a), bias_raw(est_b)
    sol_from_b = solve_weights(derive_matrices(m, d_b), m.v0)
    sol_from_a = solve_weights(derive_matrices(m, d_a), m.v0)
    value = 0.5 * combine(est_a.theta0, est_a.theta1, sol_from_b.b1) + 0.5 * combine(
        est_b.theta0, est_b.theta1, sol_from_a.b1
    )
    return SynthesisResult(
        value,
        sol_from_b,
        "split",
        est_a,
        m,
        d_b,
        {"estimates_b": est_b, "weights_b": sol_from_a, "bias_a": d_a},
    )
