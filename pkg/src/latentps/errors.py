"""Exception types shared across the package.

The CLI maps these onto exit codes: :class:`DataError` and
:class:`SpecError` give 2, :class:`NumericalError` gives 3.
"""


class LatentPSError(Exception):
    """Base class for all package errors."""


class DataError(LatentPSError, ValueError):
    """Malformed or invalid input data."""


class SpecError(LatentPSError, ValueError):
    """A model specification that cannot be identified or fitted."""


class NumericalError(LatentPSError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class ConvergenceError(NumericalError):
    """An optimizer did not reach its convergence criteria.

    Parameters
    ----------
    message : str
        Human-readable description.
    trace : dict, optional
        Diagnostic information (iterations, final gradient norm, ...).
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = dict(trace or {})


class SeparationError(NumericalError):
    """Complete or quasi-complete separation in a binary GLM."""
