"""Exception types raised across the package."""


class BrunoError(Exception):
    """Base class for all package errors."""


class ConstraintViolation(BrunoError, ValueError):
    pass


class DomainError(BrunoError, ValueError):
    pass


class NonFinite(BrunoError, ValueError):
    pass


class RangeError(BrunoError, ValueError):
    pass


class ShapeMismatch(BrunoError, ValueError):
    pass


class Diverged(BrunoError, RuntimeError):
    """Training produced a non-finite loss. ``trace`` holds the losses so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class InsufficientData(BrunoError, ValueError):
    pass


class BadMagic(BrunoError, ValueError):
    pass


class TruncatedFile(BrunoError, ValueError):
    pass


class DimensionMismatch(BrunoError, ValueError):
    pass


class VersionMismatch(BrunoError, ValueError):
    pass


class CorruptFile(BrunoError, ValueError):
    pass


class DegenerateBatch(UserWarning):
    """Warned (not raised) when data-dependent init meets a zero-variance unit."""
