"""Exception types shared across the package."""


class UmbraError(Exception):
    """Base class for errors raised by this package."""


class DecodeError(UmbraError):
    """Malformed or unsupported image stream."""


class ConvergenceError(UmbraError):
    """An iterative solver failed to converge within its iteration cap.

    Carries the best-so-far residual so callers can report how close the
    solver got.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
