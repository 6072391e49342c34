"""Exception types shared across the package."""

from __future__ import annotations


class PerfhomError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(PerfhomError, ValueError):
    """A process, radii or plan field has an invalid value.

    ``key`` holds the dotted path of the offending field.
    """

    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")

    def prefixed(self, prefix: str) -> "InvalidSpecError":
        return InvalidSpecError(f"{prefix}.{self.key}" if prefix else self.key, self.message)


class WindowError(PerfhomError, ValueError):
    """Sampling window is degenerate or does not contain the required region."""


class EmptyConfigurationError(PerfhomError, ValueError):
    pass


class EpsilonTooLargeError(PerfhomError, ValueError):
    pass


class WrongProcessKindError(PerfhomError, ValueError):
    pass


class InfiniteMomentError(PerfhomError, ValueError):
    pass


class UnderResolvedError(PerfhomError, ValueError):
    pass


class GridMismatchError(PerfhomError, ValueError):
    pass


class ConvergenceError(PerfhomError, RuntimeError):
    def __init__(self, message: str, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message)
