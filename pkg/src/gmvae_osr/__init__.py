"""Supervised Gaussian-mixture VAE with nearest-centroid open-set rejection."""

__version__ = "0.1.0"

from .errors import (ContractError, DimensionError, DivergenceError, DomainError, FitError,
                     FormatError, GmvaeError)

__all__ = ["ContractError", "DimensionError", "DivergenceError", "DomainError", "FitError",
           "FormatError", "GmvaeError", "__version__"]
