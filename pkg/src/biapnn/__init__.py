"""Asymptotic-preserving and bi-fidelity neural solvers for the semiconductor
Boltzmann equation, with a classical micro-macro reference scheme."""

__version__ = "0.1.0"

from .velocity import HermiteBasis, build_basis, diffusion_coefficient_T  # noqa: F401
from .problems import ProblemSpec, get_problem, problem_one, problem_two  # noqa: F401
from .reference import SpatialGrid, run_reference, solve_drift_diffusion  # noqa: F401
