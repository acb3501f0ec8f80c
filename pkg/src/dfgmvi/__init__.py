"""Derivative-free Gaussian-mixture variational inference."""

from .exceptions import ConfigError, ForwardMapError, PositivityLost, UnsupportedForm
from .mixture import GaussianMixture
from .problems import ForwardProblem, get_problem, list_problems
from .solver import SolverConfig, run

__all__ = ["GaussianMixture", "ForwardProblem", "SolverConfig", "run", "get_problem",
           "list_problems", "ConfigError", "ForwardMapError", "PositivityLost",
           "UnsupportedForm"]
__version__ = "0.1.0"
