"""Propensity-score analysis with latent confounders measured with error.

The central idea: when a confounder X is only observed through noisy items W,
weighting on the *inclusive* factor score E[X | W, Z, A] (from a jointly fitted
measurement and exposure model) removes the bias that conventional proxies
leave behind.
"""

from latentps.data import Dataset, MeasurementSpec, ModelSpec, load_dataset, validate_spec
from latentps.errors import (
    ConvergenceError,
    DataError,
    LatentPSError,
    NumericalError,
    SeparationError,
    SpecError,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DataError",
    "Dataset",
    "LatentPSError",
    "MeasurementSpec",
    "ModelSpec",
    "NumericalError",
    "SeparationError",
    "SpecError",
    "load_dataset",
    "validate_spec",
]
