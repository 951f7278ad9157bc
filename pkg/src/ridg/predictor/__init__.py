"""Space-time prediction: integral tables, region operators and Newton solves."""

from .region import (
    BACKENDS,
    NewtonConfig,
    PredictionResult,
    RegionOperator,
    RegionSystem,
    gather_regions,
    predict_all,
    predict_region,
    project_flux_jacobian,
    region_jacobian,
    region_residual,
)
from .tables import QQFTables, build_tables, contract_triple, load_or_build

__all__ = [
    "BACKENDS",
    "NewtonConfig",
    "PredictionResult",
    "QQFTables",
    "RegionOperator",
    "RegionSystem",
    "build_tables",
    "contract_triple",
    "gather_regions",
    "load_or_build",
    "predict_all",
    "predict_region",
    "project_flux_jacobian",
    "region_jacobian",
    "region_residual",
]
