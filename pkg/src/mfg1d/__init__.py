"""Finite-difference solver for one-dimensional first-order mean field games
posed as a quasilinear elliptic problem in space-time."""

from .errors import (
    AssumptionFailure,
    ClampOverflow,
    ConfigError,
    DomainError,
    GridMismatch,
    InsufficientData,
    MFGError,
    NoConvergence,
    NoRoot,
    OutOfRange,
    PreconditionFailure,
    SingularMatrix,
    UnsupportedDerivative,
)
from .grid import DensitySlice, Field, GridSpec
from .hamiltonian import Coupling, HamiltonianModel, TerminalCost, check_assumptions
from .pipeline import ProblemKind, ProblemSpec, SolutionPair, solve, verify_solution
from .solver import NewtonConfig

__version__ = "0.1.0"

__all__ = [
    "AssumptionFailure",
    "ClampOverflow",
    "ConfigError",
    "Coupling",
    "DensitySlice",
    "DomainError",
    "Field",
    "GridMismatch",
    "GridSpec",
    "HamiltonianModel",
    "InsufficientData",
    "MFGError",
    "NewtonConfig",
    "NoConvergence",
    "NoRoot",
    "OutOfRange",
    "PreconditionFailure",
    "ProblemKind",
    "ProblemSpec",
    "SingularMatrix",
    "SolutionPair",
    "TerminalCost",
    "UnsupportedDerivative",
    "__version__",
    "check_assumptions",
    "solve",
    "verify_solution",
]
