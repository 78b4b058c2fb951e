"""Candidate estimators of the complier average causal effect.

Each estimator is implemented once as a kernel over frequency weights ``W``
(shape ``(B, n)``) that returns one value per weight row, NaN where the
estimator is undefined. The ``est_*`` functions are the single-dataset entry
points: they check preconditions, raise the matching error, and evaluate the
kernel under unit weights. The bootstrap evaluates the same kernels on a
stack of resampling weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import regression
from .data import Dataset, StrataCounts, validate
from .errors import (
    AllStrataDegenerate,
    DegenerateArm,
    EmptySubgroup,
    RankDeficient,
    ReferenceFailed,
    RegistryError,
    SCEError,
    WeakFirstStage,
    ZeroCompliance,
)
from .regression import LogisticFit

log = logging.getLogger(__name__)

IDS = ("IV", "TSLS", "PP", "AT", "PS", "APS", "IV_STRAT", "AT_STRAT", "PP_STRAT")
STRAT_BASES = ("IV", "AT", "PP")
MAX_CANDIDATES = 10
WEAK_FIRST_STAGE = 1e-10


@dataclass(frozen=True)
class EstimatorSpec:
    id: str
    role: str = "candidate"  # or "reference"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "id", self.id.upper())
        if self.id not in IDS:
            raise RegistryError(f"unknown estimator {self.id!r}; choose from {', '.join(IDS)}")
        if self.role not in ("candidate", "reference"):
            raise RegistryError(f"role must be 'candidate' or 'reference', got {self.role!r}")
        if self.id.endswith("_STRAT") and int(self.options.get("strata", 5)) < 2:
            raise RegistryError("stratified estimators need at least 2 strata")

    @property
    def strata(self) -> int:
        return int(self.options.get("strata", 5))


@dataclass(frozen=True)
class CandidateEstimates:
    theta0: float
    theta1: np.ndarray
    ids: tuple[str, ...]  # candidate ids, aligned with theta1
    reference: str = "TSLS"
    dropped: dict = field(default_factory=dict)  # id -> reason

    @property
    def k(self) -> int:
        return len(self.theta1)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.theta0], self.theta1])


def default_registry(reference: str = "TSLS", strata: int = 5) -> list[EstimatorSpec]:
    """Reference estimator plus every other estimator as a candidate."""
    reference = reference.upper()
    specs = [EstimatorSpec(reference, "reference")]
    for id_ in IDS:
        if id_ == reference:
            continue
        opts = {"strata": strata} if id_.endswith("_STRAT") else {}
        specs.append(EstimatorSpec(id_, "candidate", opts))
    return specs


def check_registry(registry: Sequence[EstimatorSpec]) -> None:
    if not registry:
        raise RegistryError("registry is empty")
    refs = [s for s in registry if s.role == "reference"]
    if len(refs) != 1:
        raise RegistryError(f"registry needs exactly one reference, found {len(refs)}")
    if len(registry) - 1 < 1:
        raise RegistryError("registry needs at least one candidate besides the reference")
    if len(registry) - 1 > MAX_CANDIDATES:
        raise RegistryError(f"at most {MAX_CANDIDATES} candidates are supported")
    ids = [s.id for s in registry]
    if len(set(ids)) != len(ids):
        raise RegistryError("duplicate estimator ids in registry")


def ordered(registry: Sequence[EstimatorSpec]) -> list[EstimatorSpec]:
    """Reference first, then candidates in registry order."""
    ref = [s for s in registry if s.role == "reference"]
    return ref + [s for s in registry if s.role != "reference"]


# ---------------------------------------------------------------------------
# weighted kernels


def _wsum(W, v):
    return W @ v if v.ndim == 1 else np.einsum("bn,bn->b", W, v)


def _arm_counts(z, s, W):
    n1 = W @ z
    n0 = W @ (1 - z)
    n11 = W @ (z * s)
    return n0, n1, n11


def iv_kernel(y, z, s, W):
    n0, n1, n11 = _arm_counts(z, s, W)
    with np.errstate(divide="ignore", invalid="ignore"):
        itt = (W @ (z * y)) / n1 - (W @ ((1 - z) * y)) / n0
        val = itt / (n11 / n1)
    val[(n0 <= 0) | (n1 <= 0) | (n11 <= 0)] = np.nan
    return val


def _with_intercept(*cols):
    return np.column_stack([np.ones(len(cols[0])), *cols])


def ols_effect_kernel(y, s, x, W):
    """Coefficient on ``s`` from weighted OLS of y on (1, s, x)."""
    coef, _ = regression.wls_batch(_with_intercept(s, x), y, W)
    return coef[:, 1]


def tsls_kernel(y, z, s, x, W, first_stage="ols"):
    D1 = _with_intercept(z, x)
    if first_stage == "logistic":
        coef1, _, _ = regression.logistic_batch(D1, s, W)
        shat = expit(coef1 @ D1.T)
    else:
        coef1, _ = regression.wls_batch(D1, s, W)
        shat = coef1 @ D1.T
    weak = ~(np.abs(coef1[:, 1]) >= WEAK_FIRST_STAGE)
    shat[weak] = 0.0
    B, n = W.shape
    D2 = np.empty((B, n, 2 + x.shape[1]))
    D2[:, :, 0] = 1.0
    D2[:, :, 1] = shat
    D2[:, :, 2:] = x
    coef2, _ = regression.wls_batch(D2, y, W)
    val = coef2[:, 1]
    val[weak] = np.nan
    return val


def pp_kernel(y, z, s, x, W):
    return ols_effect_kernel(y, s, x, W * (s == z))


def at_kernel(y, z, s, x, W):
    return ols_effect_kernel(y, s, x, W)


def score_kernel(z, s, x, W, family="logistic"):
    """Principal-score model of S on X fitted among Z=1 units; returns e-hat (B, n)."""
    D = _with_intercept(x) if x.shape[1] else np.ones((len(z), 1))
    Wz = W * z
    if family == "ols":
        coef, _ = regression.wls_batch(D, s, Wz)
        e = coef @ D.T
    else:
        coef, _, _ = regression.logistic_batch(D, s, Wz)
        e = expit(coef @ D.T)
    return regression.clip_prob(e)


def ps_kernel(y, z, s, W, e):
    n0, n1, n11 = _arm_counts(z, s, W)
    with np.errstate(divide="ignore", invalid="ignore"):
        pic = n11 / n1
        val = (W @ (z * s * y)) / n11 - _wsum(W * ((1 - z) * y), e) / (n0 * pic)
    val[(n0 <= 0) | (n1 <= 0) | (n11 <= 0)] = np.nan
    return val


def aps_kernel(y, z, s, x, W, e):
    n0, n1, n11 = _arm_counts(z, s, W)
    D = _with_intercept(x)
    b1, _ = regression.wls_batch(D, y, W * (z * s))
    b0, _ = regression.wls_batch(D, y, W * (1 - z))
    slope1, slope0 = b1[:, 1:], b0[:, 1:]
    r1 = y - slope1 @ x.T
    r0 = y - slope0 @ x.T
    union = (1 - z) + z * s
    with np.errstate(divide="ignore", invalid="ignore"):
        pic = n11 / n1
        t1 = _wsum(W * (z * s), r1) / n11
        t2 = _wsum(W * (1 - z), r0 * e) / (n0 * pic)
        t3 = _wsum(W * union, ((slope1 - slope0) @ x.T) * e) / ((n0 + n11) * pic)
        val = t1 - t2 + t3
    val[(n0 <= 0) | (n1 <= 0) | (n11 <= 0)] = np.nan
    return val


def strata_labels(e: np.ndarray, W: np.ndarray, strata: int) -> np.ndarray:
    """Assign each unit to a quantile group of its score.

    Units are ranked by score (stable in index order); a unit lands in group
    ``floor(strata * m / total)`` where ``m`` is the weight of units with a
    strictly smaller score. Tied scores therefore share a group, and a
    weight-``w`` row behaves exactly like ``w`` duplicated rows.
    """
    e = np.broadcast_to(e, W.shape)
    order = np.argsort(e, axis=1, kind="stable")
    es = np.take_along_axis(e, order, axis=1)
    ws = np.take_along_axis(W, order, axis=1)
    below = np.cumsum(ws, axis=1) - ws
    start = np.ones_like(es, dtype=bool)
    start[:, 1:] = es[:, 1:] != es[:, :-1]
    below = np.maximum.accumulate(np.where(start, below, -np.inf), axis=1)
    total = ws.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        lab_sorted = np.minimum(np.floor(strata * below / total), strata - 1)
    lab_sorted = np.nan_to_num(lab_sorted).astype(int)
    labels = np.empty_like(lab_sorted)
    np.put_along_axis(labels, order, lab_sorted, axis=1)
    return labels


def stratified_kernel(y, z, s, x, W, e, base: str, strata: int):
    if strata == 1:
        return _BASE_KERNELS[base](y, z, s, x, W)
    labels = strata_labels(e, W, strata)
    vals = np.stack([_BASE_KERNELS[base](y, z, s, x, W * (labels == g)) for g in range(strata)])
    valid = np.isfinite(vals)
    cnt = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(valid, vals, 0.0).sum(axis=0) / cnt
    out[cnt == 0] = np.nan
    return out


_BASE_KERNELS = {
    "IV": lambda y, z, s, x, W: iv_kernel(y, z, s, W),
    "AT": at_kernel,
    "PP": pp_kernel,
}


def estimate_batch(dataset: Dataset, registry: Sequence[EstimatorSpec], W: np.ndarray) -> np.ndarray:
    """Every estimator in ``ordered(registry)`` under every weight row.

    Returns a ``(B, len(registry))`` array, reference in column 0, NaN where
    an estimator is undefined for that weight row.
    """
    y, z, s, x = dataset.y, dataset.z, dataset.s, dataset.x
    W = np.atleast_2d(np.asarray(W, dtype=float))
    specs = ordered(registry)
    scores = {}

    def score(family):
        if family not in scores:
            scores[family] = score_kernel(z, s, x, W, family)
        return scores[family]

    out = np.empty((W.shape[0], len(specs)))
    for j, spec in enumerate(specs):
        fam = spec.options.get("score", "logistic")
        if spec.id == "IV":
            v = iv_kernel(y, z, s, W)
        elif spec.id == "TSLS":
            v = tsls_kernel(y, z, s, x, W, spec.options.get("first_stage", "ols"))
        elif spec.id == "PP":
            v = pp_kernel(y, z, s, x, W)
        elif spec.id == "AT":
            v = at_kernel(y, z, s, x, W)
        elif spec.id == "PS":
            v = ps_kernel(y, z, s, W, score(fam))
        elif spec.id == "APS":
            v = aps_kernel(y, z, s, x, W, score(fam)) if x.shape[1] else np.full(W.shape[0], np.nan)
        else:
            v = stratified_kernel(y, z, s, x, W, score(fam), spec.id[:-6], spec.strata)
        out[:, j] = v
    return out


# ---------------------------------------------------------------------------
# single-dataset entry points


def _unit(dataset):
    return np.ones((1, dataset.n))


def _require_arms(counts: StrataCounts):
    if counts.n0 == 0 or counts.n1 == 0:
        raise DegenerateArm(f"an assignment arm is empty (n0={counts.n0}, n1={counts.n1})")
    if counts.n11 == 0:
        raise ZeroCompliance("no unit with Z=1 and S=1; estimated compliance is zero")


def _finite(v: float, what: str) -> float:
    if not np.isfinite(v):
        raise RankDeficient(f"{what}: design matrix does not have full column rank")
    return float(v)


def est_iv(dataset: Dataset, counts: StrataCounts) -> float:
    _require_arms(counts)
    return float(iv_kernel(dataset.y, dataset.z, dataset.s, _unit(dataset))[0])


def est_tsls(dataset: Dataset, first_stage: str = "ols") -> float:
    y, z, s, x = dataset.y, dataset.z, dataset.s, dataset.x
    D1 = _with_intercept(z, x)
    if first_stage == "logistic":
        c1 = regression.logistic(D1, s).coefficients
    else:
        c1 = regression.ols(D1, s).coefficients
    if not abs(c1[1]) >= WEAK_FIRST_STAGE:
        raise WeakFirstStage(f"first-stage coefficient on Z is {c1[1]:.3g}; effect unidentified")
    return _finite(tsls_kernel(y, z, s, x, _unit(dataset), first_stage)[0], "TSLS second stage")


def est_pp(dataset: Dataset) -> float:
    keep = dataset.s == dataset.z
    if not (keep & (dataset.s == 1)).any() or not (keep & (dataset.s == 0)).any():
        raise EmptySubgroup("per-protocol subset lacks units with S=Z=1 or S=Z=0")
    return _finite(pp_kernel(dataset.y, dataset.z, dataset.s, dataset.x, _unit(dataset))[0], "PP")


def est_at(dataset: Dataset) -> float:
    return _finite(at_kernel(dataset.y, dataset.z, dataset.s, dataset.x, _unit(dataset))[0], "AT")


def score_design(dataset: Dataset) -> np.ndarray:
    return _with_intercept(dataset.x) if dataset.p else np.ones((dataset.n, 1))


def fit_score_model(dataset: Dataset) -> LogisticFit:
    """Logistic model for P(complier | X), fitted on the Z=1 arm where S = C."""
    arm = dataset.z == 1
    return regression.logistic(score_design(dataset)[arm], dataset.s[arm])


def _scores(dataset: Dataset, score_fit: LogisticFit) -> np.ndarray:
    return regression.predict_prob(score_fit, score_design(dataset))


def est_ps(dataset: Dataset, counts: StrataCounts, score_fit: LogisticFit) -> float:
    _require_arms(counts)
    e = _scores(dataset, score_fit)
    return float(ps_kernel(dataset.y, dataset.z, dataset.s, _unit(dataset), e[None])[0])


def est_aps(dataset: Dataset, counts: StrataCounts, score_fit: LogisticFit) -> float:
    _require_arms(counts)
    if dataset.p == 0:
        raise RankDeficient("APS needs at least one covariate")
    e = _scores(dataset, score_fit)
    v = aps_kernel(dataset.y, dataset.z, dataset.s, dataset.x, _unit(dataset), e[None])[0]
    return _finite(v, "APS subgroup regression")


def est_stratified(dataset: Dataset, base: str, score_fit: LogisticFit, strata: int = 5) -> float:
    base = base.upper()
    if base not in STRAT_BASES:
        raise RegistryError(f"stratified base must be one of {STRAT_BASES}")
    e = _scores(dataset, score_fit)
    v = stratified_kernel(dataset.y, dataset.z, dataset.s, dataset.x, _unit(dataset), e[None], base, strata)[0]
    if not np.isfinite(v):
        raise AllStrataDegenerate(f"no score stratum admits the {base} estimator")
    return float(v)


def evaluate(spec: EstimatorSpec, dataset: Dataset, counts: StrataCounts, score_fit=None) -> float:
    """Evaluate one registry entry on a dataset, raising on failure."""
    if spec.id in ("PS", "APS") or spec.id.endswith("_STRAT"):
        if score_fit is None:
            score_fit = fit_score_model(dataset)
    if spec.id == "IV":
        return est_iv(dataset, counts)
    if spec.id == "TSLS":
        return est_tsls(dataset, spec.options.get("first_stage", "ols"))
    if spec.id == "PP":
        return est_pp(dataset)
    if spec.id == "AT":
        return est_at(dataset)
    if spec.id == "PS":
        return est_ps(dataset, counts, score_fit)
    if spec.id == "APS":
        return est_aps(dataset, counts, score_fit)
    return est_stratified(dataset, spec.id[:-6], score_fit, spec.strata)


def estimate_all(dataset: Dataset, registry: Sequence[EstimatorSpec]) -> CandidateEstimates:
    """Evaluate the registry; failing candidates are dropped with a logged reason."""
    check_registry(registry)
    counts = validate(dataset)
    specs = ordered(registry)
    ref = specs[0]
    score_fit = None
    needs_score = any(s.id in ("PS", "APS") or s.id.endswith("_STRAT") for s in specs)
    score_error = None
    if needs_score:
        try:
            score_fit = fit_score_model(dataset)
        except SCEError as exc:
            score_error = exc

    def run(spec):
        if score_error is not None and (spec.id in ("PS", "APS") or spec.id.endswith("_STRAT")):
            raise score_error
        return evaluate(spec, dataset, counts, score_fit)

    try:
        theta0 = run(ref)
    except SCEError as exc:
        raise ReferenceFailed(f"reference estimator {ref.id} failed: {exc}") from exc
    ids, vals, dropped = [], [], {}
    for spec in specs[1:]:
        try:
            v = run(spec)
        except SCEError as exc:
            reason = f"{type(exc).__name__}: {exc}"
            log.info("dropping candidate %s (%s)", spec.id, reason)
            dropped[spec.id] = reason
            continue
        ids.append(spec.id)
        vals.append(v)
    if not ids:
        raise ReferenceFailed("every candidate estimator failed; nothing to combine")
    return CandidateEstimates(theta0, np.array(vals), tuple(ids), ref.id, dropped)


def analytic_variances_toy(sigma2: float, counts: StrataCounts, e_hat) -> tuple[float, float]:
    """Conditional variances of the PS and IV estimators under the linear
    outcome model with homoskedastic noise ``sigma2``; ``e_hat`` holds the
    scores of the control arm."""
    if counts.n11 == 0 or counts.pi_c_hat <= 0:
        raise ZeroCompliance("no compliers observed in the treatment arm")
    e = np.asarray(e_hat, dtype=float)
    n0, n1, n11, pic = counts.n0, counts.n1, counts.n11, counts.pi_c_hat
    var_ps = sigma2 * (1 / n11 + np.mean(e**2) / (n0 * pic**2))
    var_iv = sigma2 * ((1 / n11) * (n1 / n11) + 1 / (n0 * pic**2))
    return float(var_ps), float(var_iv)
