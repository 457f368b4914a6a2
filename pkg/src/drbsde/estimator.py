"""Estimator-style facade: configure a scheme, ``fit`` it to a problem, then
evaluate the solution along sampled paths."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .lattice import LatticeParams
from .problems import Problem, build_problem
from .schemes import SchemeKind, SolveConfig, path_cumulative, path_values, solve


def check_increments(paths, params: LatticeParams, atol: float = 1e-12) -> np.ndarray:
    """Validate an array of ``(e, eta)`` increments of shape ``(..., n, 2)``.

    ``e`` must be ``+-1`` and ``eta`` one of ``kappa - 1`` (no jump) or
    ``kappa`` (jump).
    """
    paths = np.asarray(paths, dtype=float)
    if paths.ndim < 2 or paths.shape[-2:] != (params.n, 2):
        raise ValueError(f"paths must have shape (..., {params.n}, 2), got {paths.shape}")
    e, eta = paths[..., 0], paths[..., 1]
    if not np.all(np.abs(np.abs(e) - 1.0) <= atol):
        raise ValueError("walk increments must be +-1")
    no_jump, jump = params.kappa - 1.0, params.kappa
    if not np.all((np.abs(eta - no_jump) <= atol) | (np.abs(eta - jump) <= atol)):
        raise ValueError("jump increments must be kappa - 1 or kappa")
    return paths


class DRBSDESolver(BaseEstimator):
    """Lattice solver with a scikit-learn style interface.

    Parameters
    ----------
    n : int
        Number of time steps.
    scheme : str
        One of ``explicit_reflected``, ``implicit_reflected``,
        ``explicit_penalized``, ``implicit_penalized``.
    p : float, optional
        Penalty intensity, required by the penalized schemes.
    root_tol, max_iter : float, int
        Settings of the scalar root solves.
    retain : bool
        Keep every node value (needed by ``predict``).
    validate : bool
        Enforce the scheme preconditions before solving.

    Attributes
    ----------
    solution_ : LatticeSolution
    params_ : LatticeParams
    y0_ : float
    """

    def __init__(self, n=100, scheme="explicit_reflected", p=None, root_tol=1e-12,
                 max_iter=200, retain=True, validate=True):
        self.n = n
        self.scheme = scheme
        self.p = p
        self.root_tol = root_tol
        self.max_iter = max_iter
        self.retain = retain
        self.validate = validate

    def fit(self, problem, y=None):
        """Solve ``problem`` (a ``Problem`` or a registry name)."""
        if isinstance(problem, str):
            problem = build_problem(problem)
        if not isinstance(problem, Problem):
            raise TypeError("fit expects a Problem or a registry name")
        kind = SchemeKind(self.scheme, self.p)
        self.problem_ = problem
        self.params_ = problem.params(self.n)
        self.solution_ = solve(problem, self.params_, kind,
                               SolveConfig(root_tol=self.root_tol, max_iter=self.max_iter),
                               retain=self.retain, validate=self.validate)
        self.y0_ = self.solution_.y0
        return self

    def predict(self, paths):
        """Values ``y`` along each path, shape ``(..., n + 1)``."""
        check_is_fitted(self, "solution_")
        return path_values(self.solution_, check_increments(paths, self.params_), "y")

    def pushes(self, paths):
        """Cumulative pushes ``(A, K, A - K)`` along each path."""
        check_is_fitted(self, "solution_")
        return path_cumulative(self.solution_, check_increments(paths, self.params_))
