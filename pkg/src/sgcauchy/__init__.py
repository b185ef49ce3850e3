"""SG-hyperbolic Cauchy problems through Fourier integral operators on periodic grids."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractionError,
    EquivalenceError,
    InadmissibleNoiseError,
    IrregularPhaseError,
    NotHyperbolicError,
    NotInvolutiveError,
    NumericalError,
    PicardError,
    SGError,
)
from .fio import FioOperator, adjoint_defect, apply_fio
from .gridcore import Grid, GridFunction, fourier_forward, fourier_inverse, read_sgpr, write_sgpr
from .multiphase import exchange_time, multiproduct_phase
from .phasecalc import build_eikonal_phase, eikonal_residual, solve_hamilton_flow
from .propagator import (
    FirstOrderSystem,
    MthOrderProblem,
    PropagatorPlan,
    characteristic_roots,
    classify_hyperbolicity,
    fundamental_apply,
    solve_cauchy_mth,
    systemize,
)
from .stochastic import NoiseSpec, StochasticForcing, check_noise_admissible, mc_solution, sample_noise
from .symbols import SymbolFamily, check_involutive, symbol
from .wavefront import estimate_wavefront, propagate_wavefront

__all__ = [
    "ConfigError",
    "ContractionError",
    "EquivalenceError",
    "FioOperator",
    "FirstOrderSystem",
    "Grid",
    "GridFunction",
    "InadmissibleNoiseError",
    "IrregularPhaseError",
    "MthOrderProblem",
    "NoiseSpec",
    "NotHyperbolicError",
    "NotInvolutiveError",
    "NumericalError",
    "PicardError",
    "PropagatorPlan",
    "SGError",
    "StochasticForcing",
    "SymbolFamily",
    "adjoint_defect",
    "apply_fio",
    "build_eikonal_phase",
    "characteristic_roots",
    "check_involutive",
    "check_noise_admissible",
    "classify_hyperbolicity",
    "eikonal_residual",
    "estimate_wavefront",
    "exchange_time",
    "fourier_forward",
    "fourier_inverse",
    "fundamental_apply",
    "mc_solution",
    "multiproduct_phase",
    "propagate_wavefront",
    "read_sgpr",
    "sample_noise",
    "solve_cauchy_mth",
    "solve_hamilton_flow",
    "symbol",
    "systemize",
    "write_sgpr",
]
