"""Monte Carlo experiments with the two data-generating mechanisms.

Mechanism 1: four standard-normal covariates and a Bernoulli(1/2) covariate
``X5`` drive compliance; ``X5`` is hidden from the analysis, so ``eta``
controls how badly estimators that assume no compliance effect are biased.
Mechanism 2: one covariate, with ``alpha_c`` and ``lambda_c - lambda_n``
controlling the compliance effect and ``gamma_c`` the CACE.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, MonotonicityWarning
from .errors import SCEError, TooManyFailedReps
from .estimators import EstimatorSpec, default_registry, estimate_all, ordered
from .inference import normal_ci, sce_inference
from .resample import bootstrap_sigma, substream
from .synthesis import split_combination, synthesize
from .resample import split

log = logging.getLogger(__name__)

SCE_RAW, SCE_SHRUNK, SCE_SPLIT = "SCE_RAW", "SCE_SHRUNK", "SCE_SPLIT"
METRICS = ("mean", "bias", "variance", "mse", "coverage", "mean_se", "emp_se", "reps")
MAX_FAIL_FRACTION = 0.05


@dataclass(frozen=True)
class Dgm1Config:
    n: int = 500
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("n must be at least 20")


@dataclass(frozen=True)
class Dgm2Config:
    n: int = 200
    alpha_c: float = 0.0
    gamma_c: float = 0.0
    lambda_n: float = 1.0
    lambda_c: float = 1.0
    beta0: float = 0.41
    beta1: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("n must be at least 20")


def gen_dgm1(cfg: Dgm1Config, rng: np.random.Generator | None = None) -> tuple[Dataset, float]:
    rng = substream(cfg.seed) if rng is None else rng
    n = cfg.n
    x = rng.standard_normal((n, 4))
    x5 = rng.binomial(1, 0.5, n).astype(float)
    pi_c = expit(0.5 * x[:, 0] + 0.5 * x[:, 1] + x[:, 2] + x[:, 3] + cfg.eta * x5)
    c = (rng.random(n) < pi_c).astype(float)
    z = rng.binomial(1, 0.5, n).astype(float)
    s = z * c
    eps = rng.standard_normal(n)
    base = x.sum(axis=1) + x5 + eps
    y1 = base + 2 * c + 1
    y0 = base + 2
    y = s * y1 + (1 - s) * y0
    return Dataset(y, z, s, x, ("x1", "x2", "x3", "x4")), 1.0


def gen_dgm2(cfg: Dgm2Config, rng: np.random.Generator | None = None) -> tuple[Dataset, float]:
    rng = substream(cfg.seed) if rng is None else rng
    n = cfg.n
    x = rng.standard_normal(n)
    c = (rng.random(n) < expit(cfg.beta0 + cfg.beta1 * x)).astype(float)
    z = rng.binomial(1, 0.5, n).astype(float)
    s = z * c
    eps = rng.standard_normal(n)
    # C*Z == C*S under strong monotonicity; written through S so Y never sees Z directly
    y = cfg.alpha_c * c + cfg.gamma_c * c * s + cfg.lambda_n * x + (cfg.lambda_c - cfg.lambda_n) * c * x + eps
    return Dataset(y, z, s, x[:, None], ("x1",)), float(cfg.gamma_c)


def compliance_rate(beta0: float, beta1: float, draws: int = 400_000, seed: int = 20240) -> float:
    x = substream(seed).standard_normal(draws)
    return float(expit(beta0 + beta1 * x).mean())


def calibrate_beta0(target: float, beta1: float = 2.0, tol: float = 0.005) -> float:
    """Intercept giving marginal compliance ``target`` (bisection on a fixed
    simulated covariate sample)."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = (lo + hi) / 2
        rate = compliance_rate(mid, beta1)
        if abs(rate - target) < tol / 10:
            return mid
        if rate < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def generate(dgm: int, cfg, rng=None):
    if dgm == 1:
        return gen_dgm1(cfg, rng)
    if dgm == 2:
        return gen_dgm2(cfg, rng)
    raise ValueError(f"dgm must be 1 or 2, got {dgm}")


@dataclass(frozen=True)
class McSettings:
    R: int = 500
    B: int = 200
    alpha: float = 0.05
    draws: int = 10_000
    seed: int = 0
    registry: tuple[EstimatorSpec, ...] = field(default_factory=lambda: tuple(default_registry()))


def _sub_seed(seed: int, r: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, r, tag]).generate_state(1)[0])


def replicate(dgm: int, cfg, r: int, st: McSettings) -> dict:
    """One Monte Carlo replication. Returns per-estimator estimate / se /
    interval, or ``{"failed": reason}``."""
    registry = list(st.registry)
    data, truth = generate(dgm, cfg, substream(st.seed, r, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        try:
            est = estimate_all(data, registry)
            moments = bootstrap_sigma(data, registry, st.B, _sub_seed(st.seed, r, 1), ids=est.ids)
        except SCEError as exc:
            return {"failed": f"{type(exc).__name__}: {exc}"}

        out: dict = {}
        ref = est.reference
        se0 = math.sqrt(max(moments.v0, 0.0))
        out[ref] = (est.theta0, se0, *normal_ci(est.theta0, se0, st.alpha))
        for spec in ordered(registry)[1:]:
            if spec.id in est.ids:
                out[spec.id] = (float(est.theta1[est.ids.index(spec.id)]), math.nan, math.nan, math.nan)
            else:
                out[spec.id] = (math.nan,) * 4
        for name, variant in ((SCE_RAW, "raw"), (SCE_SHRUNK, "shrunk")):
            sr = synthesize(est, moments, variant)
            inf, _ = sce_inference(sr, data.n, st.alpha, st.draws, _sub_seed(st.seed, r, 3))
            out[name] = (sr.estimate, inf.se, inf.ci_lower, inf.ci_upper)
        try:
            pair = split(data, _sub_seed(st.seed, r, 2))
            sr = split_combination(estimate_all(pair.half_a, registry), estimate_all(pair.half_b, registry), moments)
            out[SCE_SPLIT] = (sr.estimate, math.nan, math.nan, math.nan)
        except SCEError:
            out[SCE_SPLIT] = (math.nan,) * 4
    return {"truth": truth, "values": out}


@dataclass
class McReport:
    dgm: int
    config: dict
    R: int
    seed: int
    truth: float
    records: dict  # estimator -> {metric: value}
    failed: int = 0
    trace: list = field(default_factory=list)  # (rep, estimator, estimate, se, lower, upper)

    def rows(self) -> list[dict]:
        """One tidy row per (estimator, metric)."""
        params = {k: v for k, v in self.config.items() if k not in ("seed",)}
        out = []
        for est, rec in self.records.items():
            for metric in METRICS:
                out.append({"dgm": self.dgm, **params, "estimator": est, "metric": metric,
                            "value": rec[metric], "R": self.R, "seed": self.seed})
        return out


def summarize(values: np.ndarray, ses: np.ndarray, lo: np.ndarray, hi: np.ndarray, truth: float) -> dict:
    ok = np.isfinite(values)
    v = values[ok]
    m = len(v)
    if m == 0:
        return {k: math.nan for k in METRICS} | {"reps": 0}
    mean = float(v.mean())
    var = float(((v - mean) ** 2).mean())
    has_ci = np.isfinite(lo[ok]) & np.isfinite(hi[ok])
    coverage = float(((lo[ok] <= truth) & (truth <= hi[ok]))[has_ci].mean()) if has_ci.any() else math.nan
    se_ok = np.isfinite(ses[ok])
    return {
        "mean": mean,
        "bias": mean - truth,
        "variance": var,
        "mse": float(((v - truth) ** 2).mean()),
        "coverage": coverage,
        "mean_se": float(ses[ok][se_ok].mean()) if se_ok.any() else math.nan,
        "emp_se": math.sqrt(var),
        "reps": m,
    }


def _replicate_star(args):
    return replicate(*args)


def run_mc(dgm: int, cfg, st: McSettings, threads: int = 1, trace: bool = False) -> McReport:
    if st.R < 2:
        raise ValueError("R must be at least 2")
    jobs = [(dgm, cfg, r, st) for r in range(st.R)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_star, jobs, chunksize=max(1, st.R // (4 * threads))))
    else:
        results = [replicate(*j) for j in jobs]
    return aggregate(dgm, cfg, st, results, trace)


def aggregate(dgm: int, cfg, st: McSettings, results: Sequence[dict], trace: bool = False) -> McReport:
    good = [(r, res) for r, res in enumerate(results) if "failed" not in res]
    failed = len(results) - len(good)
    if failed > MAX_FAIL_FRACTION * len(results):
        reasons = {res["failed"] for res in results if "failed" in res}
        raise TooManyFailedReps(f"{failed} of {len(results)} replications failed: {sorted(reasons)[:3]}")
    truth = good[0][1]["truth"]
    names = list(good[0][1]["values"])
    records = {}
    rows = []
    for name in names:
        arr = np.array([res["values"][name] for _, res in good], dtype=float)
        records[name] = summarize(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], truth)
        if trace:
            rows.extend((r, name, *res["values"][name]) for r, res in good)
    if trace:
        rows.sort(key=lambda t: (t[0], names.index(t[1])))
    return McReport(dgm, asdict(cfg), st.R, st.seed, truth, records, failed, rows)


def sweep(grid: Sequence[tuple[int, object]], st: McSettings, threads: int = 1, trace: bool = False) -> list[McReport]:
    """``run_mc`` at every ``(dgm, config)`` grid point, in grid order."""
    if not grid:
        raise ValueError("sweep grid is empty")
    return [run_mc(dgm, cfg, st, threads, trace) for dgm, cfg in grid]


def dgm1_grid(ns=(200, 500, 1000), etas=(-2, -1, 0, 1, 2)) -> list[tuple[int, Dgm1Config]]:
    return [(1, Dgm1Config(n=n, eta=float(eta))) for n in ns for eta in etas]


def dgm2_grid(ns=(200, 500, 1000), alphas=(0, 0.1, 0.2, 0.3, 0.4, 0.5), **kw) -> list[tuple[int, Dgm2Config]]:
    return [(2, Dgm2Config(n=n, alpha_c=float(a), **kw)) for n in ns for a in alphas]
