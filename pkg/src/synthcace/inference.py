"""Asymptotic second moment of the synthetic estimator and confidence intervals.

With ``J ~ N(d, T)`` and ``K = -(P'T^-1 J)(J'T^-1 J) / (1 + J'T^-1 J)``, the
limiting second moment of ``sqrt(n) (theta_s - theta)`` is

    V0 + (lambda - 1) P'T^-1 P + (P'T^-1 d)^2 (1 - 2 rho + lambda)

where ``E[K] = -rho P'T^-1 d`` and ``E[K^2] = lambda P'T^-1 (T + dd') T^-1 P``.
The constants are estimated by simulating ``J``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .errors import DegenerateNormalization, InvalidAlpha, SingularT
from .resample import SamplingMoments, substream
from .synthesis import SynthesisResult, derive_matrices

K_TAG = 0x4B4D
RHO_EPS = 1e-12


@dataclass(frozen=True)
class KMoments:
    e_k: float
    e_k2: float
    rho_hat: float
    lambda_hat: float
    draws: int
    seed: int
    se_e_k: float = 0.0
    se_e_k2: float = 0.0
    var_k: float = 0.0  # empirical var(K), divisor draws
    se_var_k: float = 0.0
    ptd: float = 0.0  # P'T^-1 d
    ptp: float = 0.0  # P'T^-1 P
    normalizer: float = 0.0  # P'T^-1 (T + dd') T^-1 P

    @property
    def se_lambda(self) -> float:
        return self.se_e_k2 / self.normalizer if self.normalizer > 0 else 0.0


@dataclass(frozen=True)
class InferenceResult:
    estimate: float
    varsigma_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    alpha: float
    diagnostics: dict = field(default_factory=dict)


def _cholesky(t_mat) -> np.ndarray:
    try:
        return linalg.cholesky(np.asarray(t_mat, dtype=float), lower=True)
    except linalg.LinAlgError:
        raise SingularT("T is not positive definite") from None


def repair_pd(t_mat) -> tuple[np.ndarray, float]:
    """Add the smallest ridge (multiples of 1e-10 * mean diagonal) that makes
    ``t_mat`` Cholesky-factorable. Returns the matrix and the ridge used."""
    T = np.asarray(t_mat, dtype=float)
    T = (T + T.T) / 2
    k = len(T)
    scale = max(np.trace(T) / k, 1e-300) if k else 1.0
    ridge = 0.0
    for _ in range(12):
        try:
            linalg.cholesky(T + ridge * np.eye(k), lower=True)
            return T + ridge * np.eye(k), ridge
        except linalg.LinAlgError:
            ridge = 1e-10 * scale if ridge == 0 else ridge * 10
    raise SingularT("T could not be repaired to positive definite")


def k_moments(p_vec, t_mat, d_vec, draws: int = 10_000, seed: int = 0) -> KMoments:
    if draws < 1000:
        raise ValueError("need at least 1000 draws")
    P = np.asarray(p_vec, dtype=float)
    d = np.asarray(d_vec, dtype=float)
    L = _cholesky(t_mat)
    h = linalg.cho_solve((L, True), P)  # T^-1 P
    rng = substream(seed, K_TAG)
    J = d + rng.standard_normal((draws, len(P))) @ L.T
    TinvJ = linalg.cho_solve((L, True), J.T).T
    q = np.einsum("ij,ij->i", J, TinvJ)
    K = -(J @ h) * q / (1 + q)
    K2 = K**2
    e_k, e_k2 = float(K.mean()), float(K2.mean())
    ptd = float(h @ d)
    ptp = float(h @ P)
    normalizer = ptp + ptd**2
    if normalizer < 0 or (normalizer == 0 and np.any(P != 0)):
        raise DegenerateNormalization(f"P'T^-1(T + dd')T^-1 P = {normalizer:g}")
    rho = e_k / -ptd if abs(ptd) > RHO_EPS else 0.0
    lam = e_k2 / normalizer if normalizer > 0 else 0.0
    dev2 = (K - e_k) ** 2
    root = np.sqrt(draws)
    return KMoments(
        e_k, e_k2, rho, lam, draws, seed,
        se_e_k=float(K.std() / root),
        se_e_k2=float(K2.std() / root),
        var_k=float(dev2.mean()),
        se_var_k=float(dev2.std() / root),
        ptd=ptd, ptp=ptp, normalizer=normalizer,
    )


def e_g2(v0: float, p_vec, t_mat, d_vec, km: KMoments) -> float:
    P = np.asarray(p_vec, dtype=float)
    d = np.asarray(d_vec, dtype=float)
    h = linalg.solve(np.asarray(t_mat, dtype=float), P, assume_a="pos")
    ptp = float(h @ P)
    ptd = float(h @ d)
    lam, rho = km.lambda_hat, km.rho_hat
    return float(v0 + (lam - 1) * ptp + ptd**2 * (1 - 2 * rho + lam))


def k_identity_check(p_vec, t_mat, d_vec, km: KMoments) -> dict:
    """Check the variance identity for K and the range of lambda.

    var(K) should equal ``lambda * P'T^-1 (T + dd') T^-1 P - rho^2 (P'T^-1 d)^2``
    within 4 Monte Carlo standard errors, and lambda should lie in [0, 1]
    within 3 standard errors.
    """
    rhs = km.lambda_hat * km.normalizer - km.rho_hat**2 * km.ptd**2
    gap = abs(km.var_k - rhs)
    var_tol = 4 * km.se_var_k + 1e-12 * max(1.0, abs(rhs))
    eps = 3 * km.se_lambda
    lam_ok = -eps <= km.lambda_hat <= 1 + eps
    return {
        "var_identity": {"pass": bool(gap <= var_tol), "lhs": km.var_k, "rhs": rhs, "margin": var_tol - gap},
        "lambda_range": {
            "pass": bool(lam_ok),
            "lambda": km.lambda_hat,
            "margin": min(km.lambda_hat + eps, 1 + eps - km.lambda_hat),
        },
        "pass": bool(gap <= var_tol and lam_ok),
    }


def z_quantile(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}")
    return float(norm.ppf(1 - alpha / 2))


def normal_ci(estimate: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    z = z_quantile(alpha)
    return estimate - z * se, estimate + z * se


def scaled_matrices(moments: SamplingMoments, d_vec, n: int):
    """(V0, P, T, d) on the root-n scale: n*V0_n, n*P_n, n*T_n, sqrt(n)*d_n."""
    dm = derive_matrices(moments, d_vec)
    return n * moments.v0, n * dm.p_vec, n * dm.t_mat, np.sqrt(n) * dm.d_vec


def confidence_interval(sr: SynthesisResult, moments: SamplingMoments, km: KMoments, alpha: float, n: int) -> InferenceResult:
    """Normal interval ``estimate +/- z * sqrt(varsigma / n)``.

    ``km`` must come from the root-n scaled (P, T, d) of ``scaled_matrices``
    (rho and lambda do not depend on the scale, so unscaled inputs give the
    same constants). A negative plug-in second moment is floored at zero.
    """
    z = z_quantile(alpha)
    v0, P, T, d = scaled_matrices(moments, sr.bias, n)
    T, ridge = repair_pd(T)
    varsigma = e_g2(v0, P, T, d, km)
    diag = {"ridge": ridge, "lambda_hat": km.lambda_hat, "rho_hat": km.rho_hat}
    if varsigma < 0:
        diag["floored"] = varsigma
        varsigma = 0.0
    se = float(np.sqrt(varsigma / n))
    return InferenceResult(sr.estimate, varsigma, se, sr.estimate - z * se, sr.estimate + z * se, alpha, diag)


def sce_inference(sr: SynthesisResult, n: int, alpha: float = 0.05, draws: int = 10_000, seed: int = 0) -> tuple[InferenceResult, KMoments]:
    """Simulate the K moments for ``sr`` and build its confidence interval."""
    moments = sr.moments
    _, P, T, d = scaled_matrices(moments, sr.bias, n)
    T, _ = repair_pd(T)
    km = k_moments(P, T, d, draws, seed)
    return confidence_interval(sr, moments, km, alpha, n), km
