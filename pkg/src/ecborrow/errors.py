"""Exception hierarchy shared across the package.

Every error raised on a contract violation derives from :class:`EcborrowError`
so callers (in particular the CLI) can map failures onto exit codes without
string matching.
"""


class EcborrowError(Exception):
    """Base class for all package errors."""


class InsufficientEvents(EcborrowError):
    """Too few (distinct) event times to build the requested partition."""


class ShapeError(EcborrowError):
    """A weight matrix or design block does not match the data it is applied to."""


class DomainError(EcborrowError):
    """A parameter value lies outside its mathematical domain."""


class SingularDesign(EcborrowError):
    """Design matrix rank deficient, or curvature at the mode not negative definite."""


class NoConvergence(EcborrowError):
    """Newton iterations exhausted without meeting the convergence tolerances."""


class CalibrationFailure(EcborrowError):
    """No grid point satisfies the calibration constraint."""


class HarnessError(EcborrowError):
    """Too many per-replicate failures in a simulation run."""


class ParseError(EcborrowError):
    """Malformed input file; carries the offending row number when known."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EmptyExternal(EcborrowError):
    """An operation requiring external controls received none."""


class ConvergenceWarning(UserWarning):
    """MCMC diagnostic threshold exceeded; results returned anyway."""
