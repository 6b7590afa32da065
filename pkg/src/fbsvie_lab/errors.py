"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or shape contract."""


class ResourceCapError(RuntimeError):
    """Raised when an allocation would exceed the configured memory budget."""


class NumericalAbort(RuntimeError):
    """Raised when NaN/overflow appears mid-simulation; carries the location."""

    def __init__(self, message: str, step: int | None = None, path: int | None = None):
        super().__init__(message)
        self.step = step
        self.path = path
