"""Linear multistep methods for ODEs with memory."""

from .lmm import LMMSpec, builtin_methods, check_root_condition, get_method
from .oracle import exact_solution_for, exp_kernel_exact
from .problem import (
    CustomKernel,
    Exponential,
    GeneralG,
    LinearTestProblem,
    MemoryProblem,
    PowerLaw,
    SeparableKernel,
    builtin_example,
)
from .quadrature import builtin_rules, get_rule, weights_for
from .solver import SolverConfig, SolveResult, solve

__version__ = "0.1.0"
