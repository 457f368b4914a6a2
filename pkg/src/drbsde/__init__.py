"""Doubly reflected BSDEs with jumps on a binomial–Poisson lattice.

Backward schemes (explicit/implicit, reflected/penalized), an exact
full-history tree oracle, convergence diagnostics and a CLI harness.
"""

from .diagnostics import (AprioriSums, GapNorms, InvariantReport, apriori_sums,
                          discrete_gronwall_check, invariant_suite, n0_threshold, rate_fit,
                          scheme_gap)
from .estimator import DRBSDESolver
from .exceptions import ConfigError, DRBSDEError, NumericalFailure, PreconditionError
from .lattice import LatticeParams, NodeIndex, NodeState, make_params, sample_path
from .problems import (REGISTRY, ClosedForm, Driver, ItoConstant, ItoPathwise, Problem,
                       abs_linear_driver, build_problem, constant_problem, ito_example,
                       benchmark_example, pathwise_example, validate_problem)
from .schemes import LatticeSolution, SchemeKind, SolveConfig, solve
from .tree import check_constraint_equivalence, compare_lattice_vs_tree, solve_full_tree

__all__ = [
    "constant_problem", "ito_example", "benchmark_example", "pathwise_example",
    "AprioriSums", "ClosedForm", "ConfigError", "DRBSDEError", "DRBSDESolver", "Driver",
    "GapNorms", "InvariantReport", "ItoConstant", "ItoPathwise", "LatticeParams",
    "LatticeSolution", "NodeIndex", "NodeState", "NumericalFailure", "PreconditionError",
    "Problem", "REGISTRY", "SchemeKind", "SolveConfig", "abs_linear_driver", "apriori_sums",
    "build_problem", "check_constraint_equivalence", "compare_lattice_vs_tree",
    "discrete_gronwall_check", "invariant_suite", "make_params", "n0_threshold", "rate_fit",
    "sample_path", "scheme_gap", "solve", "solve_full_tree", "validate_problem",
]
