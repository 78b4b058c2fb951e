"""Bootstrap covariance of the candidate vector, and sample splitting."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, MonotonicityWarning, validate
from .errors import CannotSplit, DataError, TooManyFailures
from .estimators import EstimatorSpec, check_registry, estimate_all, estimate_batch, ordered

log = logging.getLogger(__name__)

CHUNK = 50  # replicates per vectorised batch; fixed so results never depend on it
SPLIT_TAG = 0x5B117


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; the same keys always give
    the same stream, whatever order or process they are drawn in."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class SamplingMoments:
    sigma_full: np.ndarray
    v0: float
    c_vec: np.ndarray
    v_mat: np.ndarray
    b_draws: int
    ids: tuple[str, ...] = ()  # candidate ids, aligned with c_vec
    replicates: np.ndarray | None = None  # (b_draws, k+1), reference first

    @classmethod
    def from_sigma(cls, sigma, ids=(), b_draws=0, replicates=None) -> "SamplingMoments":
        sigma = np.asarray(sigma, dtype=float)
        sigma = (sigma + sigma.T) / 2
        return cls(sigma, float(sigma[0, 0]), sigma[1:, 0].copy(), sigma[1:, 1:].copy(), b_draws, tuple(ids), replicates)

    @property
    def k(self) -> int:
        return len(self.c_vec)

    def subset(self, ids: Sequence[str]) -> "SamplingMoments":
        """Moments restricted to the reference and the candidates ``ids``."""
        pos = [0] + [1 + self.ids.index(i) for i in ids]
        reps = None if self.replicates is None else self.replicates[:, pos]
        return SamplingMoments.from_sigma(self.sigma_full[np.ix_(pos, pos)], ids, self.b_draws, reps)


def bootstrap_weights(n: int, B: int, seed: int) -> np.ndarray:
    """Row multiplicities of ``B`` with-replacement resamples of ``n`` rows."""
    W = np.empty((B, n))
    for b in range(B):
        idx = substream(seed, b).integers(0, n, n)
        W[b] = np.bincount(idx, minlength=n)
    return W


def bootstrap_replicates(dataset: Dataset, registry: Sequence[EstimatorSpec], B: int, seed: int) -> np.ndarray:
    """``(B, len(registry))`` estimates on bootstrap resamples, reference first."""
    W = bootstrap_weights(dataset.n, B, seed)
    return np.concatenate([estimate_batch(dataset, registry, W[i : i + CHUNK]) for i in range(0, B, CHUNK)])


def bootstrap_sigma(
    dataset: Dataset,
    registry: Sequence[EstimatorSpec],
    B: int = 200,
    seed: int = 0,
    ids: Sequence[str] | None = None,
) -> SamplingMoments:
    """Nonparametric pairs bootstrap of the candidate covariance.

    ``ids`` selects the candidates (default: those defined on the full data).
    Replicates where the reference fails are dropped. A candidate undefined
    in some replicates costs those replicates; if that would leave fewer than
    ``ceil(B/2)`` replicates, the candidate with the most failures is dropped
    from the moments instead.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    check_registry(registry)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        validate(dataset)
        if ids is None:
            ids = estimate_all(dataset, registry).ids
    specs = ordered(registry)
    col = {s.id: j for j, s in enumerate(specs)}
    reps = bootstrap_replicates(dataset, registry, B, seed)
    floor = max(2, math.ceil(B / 2))

    reps = reps[np.isfinite(reps[:, 0])]
    if len(reps) < floor:
        raise TooManyFailures(f"reference failed in {B - len(reps)} of {B} bootstrap replicates")
    ids = list(ids)
    while True:
        sub = reps[:, [0] + [col[i] for i in ids]]
        ok = np.isfinite(sub).all(axis=1)
        if ok.sum() >= floor or not ids:
            break
        worst = ids[int(np.argmax((~np.isfinite(sub[:, 1:])).sum(axis=0)))]
        log.info("dropping candidate %s from bootstrap moments (too many failed replicates)", worst)
        ids.remove(worst)
    if not ids:
        raise TooManyFailures("no candidate is defined in enough bootstrap replicates")
    sub = sub[ok]
    sigma = np.cov(sub, rowvar=False, ddof=1).reshape(len(ids) + 1, len(ids) + 1)
    return SamplingMoments.from_sigma(sigma, ids, len(sub), sub)


@dataclass(frozen=True)
class SplitPair:
    half_a: Dataset
    half_b: Dataset
    idx_a: np.ndarray
    idx_b: np.ndarray


def split(dataset: Dataset, seed: int, attempts: int = 100) -> SplitPair:
    """Random partition into halves whose sizes differ by at most one; both
    halves must have non-empty assignment arms."""
    n = dataset.n
    if n < 4:
        raise CannotSplit(f"need at least 4 rows to split, got {n}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        for attempt in range(attempts):
            perm = substream(seed, SPLIT_TAG, attempt).permutation(n)
            ia, ib = np.sort(perm[: n // 2]), np.sort(perm[n // 2 :])
            a, b = dataset.take(ia), dataset.take(ib)
            try:
                validate(a)
                validate(b)
            except DataError:
                continue
            return SplitPair(a, b, ia, ib)
    raise CannotSplit(f"no admissible split found in {attempts} attempts")
