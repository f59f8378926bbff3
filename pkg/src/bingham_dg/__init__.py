"""Divergence-conforming dG solver for variable-density Huber-regularized Bingham flow."""
from .cases import CASES, build_case, default_case
from .forms import Discretization, FieldState, Problem
from .huber import PhysParams
from .mesh import generate_structured_mesh
from .ssn import SolverConfig, ssn_solve
from .timeloop import SimulationClock, advance, run, solve_steady

__version__ = "0.1.0"

__all__ = ["CASES", "build_case", "default_case", "Discretization", "FieldState", "Problem",
           "PhysParams", "generate_structured_mesh", "SolverConfig", "ssn_solve",
           "SimulationClock", "advance", "run", "solve_steady"]
