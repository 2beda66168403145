"""Exception hierarchy shared by the library and the command line."""


class NonfatError(Exception):
    """Base class for all package errors."""


class DataError(NonfatError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(NonfatError, ArithmeticError):
    """A numerical routine failed (indefinite matrix, divergence, ...)."""


class ConvergenceError(NumericalError):
    """An iterative solver did not converge."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NotPositiveDefiniteError(NumericalError):
    """Cholesky failed even after jitter escalation."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class DivergenceError(NumericalError):
    """Training produced a non-finite objective or gradient."""
