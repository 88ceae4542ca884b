"""Exception types shared across the package."""


class ChsaddleError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(ChsaddleError, ValueError):
    """Operand shapes are incompatible."""


class AssemblyError(ChsaddleError):
    """Finite element assembly failed (e.g. degenerate triangle)."""


class SizeGuardError(ChsaddleError):
    """A dense operation was requested beyond its size guard."""


class GmresNanError(ChsaddleError, FloatingPointError):
    """NaN encountered inside a Krylov iteration."""


class SingularUpdateError(ChsaddleError):
    """Rank-one update denominator is numerically zero."""


class EigenSolveError(ChsaddleError):
    """Dense eigensolver preconditions violated (symmetry, SPD factor)."""


class InfeasibleIterateError(ChsaddleError, ValueError):
    """An iterate violates the obstacle bounds beyond tolerance."""


class ObstacleSolveError(ChsaddleError):
    """The constrained multigrid solver failed to converge."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = residual_history


class AmgDivergenceError(ChsaddleError):
    """Stationary multigrid iteration diverged."""


class SolverFailureError(ChsaddleError):
    """A linear solve inside the outer iteration did not converge."""


class UsageError(ChsaddleError, ValueError):
    """Invalid command line or configuration input."""
