"""Exception hierarchy shared across the toolkit."""


class CsmError(Exception):
    """Base class for all csmarkov errors."""


class DataError(CsmError, ValueError):
    """Invalid, inconsistent or malformed input data."""


class ImpossibleObservationError(DataError):
    """An observation has probability exactly zero under the given model."""

    def __init__(self, message, trajectory_index=None):
        super().__init__(message)
        self.trajectory_index = trajectory_index


class NumericalError(CsmError, RuntimeError):
    """A numerical procedure failed to converge or produce a usable result."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
