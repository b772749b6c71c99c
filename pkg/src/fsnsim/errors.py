"""Shared exception types.

The CLI maps these onto process exit codes (I/O errors propagate as OSError):
ValidationError -> 3, ConvergenceError -> 4.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class CapacityError(ValidationError):
    """A configured size bound would be exceeded.

    Carries the measured/projected size so callers can report it.
    """

    def __init__(self, message: str, measured: int, bound: int):
        super().__init__(message)
        self.measured = measured
        self.bound = bound


class ConvergenceError(RuntimeError):
    """An iterative solve failed to reach tolerance.

    ``best`` holds the best iterate found (solver-specific payload),
    ``residual`` the residual norm at that iterate.
    """

    def __init__(self, message: str, *, residual: float, iterations: int, best=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.best = best
