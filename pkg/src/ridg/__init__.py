"""Regionally-implicit DG predictor-corrector for scalar conservation laws."""

from .errors import ConfigError, Instability, NonConvergence, RidgError

__version__ = "0.1.0"

__all__ = ["ConfigError", "Instability", "NonConvergence", "RidgError", "__version__"]
