"""Exception hierarchy shared by every graphseg module."""

from typing import Optional


class GraphsegError(Exception):
    """Base class for all graphseg failures."""


class ValidationError(GraphsegError, ValueError):
    """Bad input: shapes, ids, files or configuration values."""


class NumericalError(GraphsegError, ArithmeticError):
    """An iterate or factorization produced unusable numbers."""

    def __init__(self, message: str, iteration: Optional[int] = None, index: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration
        self.index = index


class NotPositiveDefiniteError(NumericalError):
    """The factorization hit a non-positive pivot."""

    def __init__(self, pivot: Optional[int], message: Optional[str] = None):
        where = "" if pivot is None else f" (pivot at vertex {pivot})"
        super().__init__(message or f"matrix is not positive definite{where}", index=pivot)
        self.pivot = pivot


class SelectionError(GraphsegError):
    """No finite criterion value to select from."""
