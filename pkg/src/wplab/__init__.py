"""Numerical laboratory for extension operators, wave packets, polynomial
partitioning and related tube geometry used in local smoothing estimates for
fractional Schrodinger equations."""

__version__ = "0.1.0"

from .fields import (ExperimentParams, FrequencyField, NormReport, SpaceTimeField,
                     SurfaceSpec, critical_exponent, fourier_pair_check, lp_norm,
                     make_rng)
from .extension import extend, extend_points, littlewood_paley_project, propagate

__all__ = [
    "ExperimentParams", "FrequencyField", "NormReport", "SpaceTimeField", "SurfaceSpec",
    "critical_exponent", "fourier_pair_check", "lp_norm", "make_rng",
    "extend", "extend_points", "littlewood_paley_project", "propagate",
]
