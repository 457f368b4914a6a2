"""Exception types shared across the solver, oracle and CLI."""


class DRBSDEError(Exception):
    """Base class for all package errors."""


class ConfigError(DRBSDEError, ValueError):
    """Invalid run configuration (CLI exit code 1)."""


class PreconditionError(DRBSDEError, ValueError):
    """A problem or discretization violates a solver precondition (exit code 2)."""


class NumericalFailure(DRBSDEError, ArithmeticError):
    """A root solve did not converge (exit code 3)."""

    def __init__(self, message, node=None):
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)
        self.node = node
