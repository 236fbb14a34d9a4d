"""Convex chance-constrained stochastic MPC with joint risk allocation."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .ipm import SolverConfig
from .solver import RiskProblem, Solution, assemble, kkt_report, solve, solve_deterministic, solve_fixed_risk
from .stacked import ConfigurationError, LinearModel, SpecBundle, Weights, stack_dynamics
from .uncertainty import DistributionMode, RiskBudget, ScenarioSet

__all__ = [
    "ConfigurationError",
    "DistributionMode",
    "LinearModel",
    "RiskBudget",
    "RiskProblem",
    "ScenarioSet",
    "Solution",
    "SolverConfig",
    "SpecBundle",
    "Weights",
    "assemble",
    "kkt_report",
    "solve",
    "solve_deterministic",
    "solve_fixed_risk",
    "stack_dynamics",
    "__version__",
]
