"""Mathematical programming kernels: LP, branch-and-bound MILP and SLP."""

from .lp import LpProblem, SolveOutcome, solve_lp, write_mps
from .mip import MipProblem, solve_mip
from .slp import NlpProblem, QuadraticRows, solve_slp

__all__ = [
    "LpProblem",
    "MipProblem",
    "NlpProblem",
    "QuadraticRows",
    "SolveOutcome",
    "solve_lp",
    "solve_mip",
    "solve_slp",
    "write_mps",
]
