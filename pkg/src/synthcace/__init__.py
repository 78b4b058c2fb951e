"""Synthetic estimation of the complier average causal effect.

Combines a consistent instrumental-variable estimator with cheaper but
possibly biased candidates through minimum-MSE convex weights.
"""

__version__ = "0.1.0"

from .data import Dataset, StrataCounts, read_csv, validate, write_csv
from .estimators import CandidateEstimates, EstimatorSpec, default_registry, estimate_all
from .inference import InferenceResult, KMoments, k_moments, sce_inference
from .resample import SamplingMoments, bootstrap_sigma, split
from .synthesis import SynthesisResult, WeightSolution, derive_matrices, solve_weights, synthesize, synthesize_split

__all__ = [
    "CandidateEstimates",
    "Dataset",
    "EstimatorSpec",
    "InferenceResult",
    "KMoments",
    "SamplingMoments",
    "StrataCounts",
    "SynthesisResult",
    "WeightSolution",
    "bootstrap_sigma",
    "default_registry",
    "derive_matrices",
    "estimate_all",
    "k_moments",
    "read_csv",
    "sce_inference",
    "solve_weights",
    "split",
    "synthesize",
    "synthesize_split",
    "validate",
    "write_csv",
]
