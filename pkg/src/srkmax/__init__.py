"""Stochastic Runge-Kutta time integration for Maxwell equations with additive noise."""

__version__ = "0.1.0"

from .tableau import ButcherTableau, analyze, builtin, load_tableau  # noqa: E402
from .spatial import (  # noqa: E402
    FieldState,
    Grid1D,
    Grid2DTM,
    SkewOperator,
    SpectralOperator,
    build_maxwell_1d,
    build_maxwell_2d_tm,
    build_spectral_hamiltonian,
)
from .noise import CovarianceSpec, NoisePath, NoiseProfile, coarsen, sample_path  # noqa: E402
from .model import Problem, problem_from_config  # noqa: E402
from .integrator import Stepper, StepperConfig, TangentFrame, integrate, propagate_tangent, rk_step  # noqa: E402
from .harness import ConvergenceReport, convergence_study, load_config, mc_run, write_report  # noqa: E402

__all__ = [
    "__version__",
    "ButcherTableau",
    "analyze",
    "builtin",
    "load_tableau",
    "FieldState",
    "Grid1D",
    "Grid2DTM",
    "SkewOperator",
    "SpectralOperator",
    "build_maxwell_1d",
    "build_maxwell_2d_tm",
    "build_spectral_hamiltonian",
    "CovarianceSpec",
    "NoisePath",
    "NoiseProfile",
    "coarsen",
    "sample_path",
    "Problem",
    "problem_from_config",
    "Stepper",
    "StepperConfig",
    "TangentFrame",
    "integrate",
    "propagate_tangent",
    "rk_step",
    "ConvergenceReport",
    "convergence_study",
    "load_config",
    "mc_run",
    "write_report",
]
