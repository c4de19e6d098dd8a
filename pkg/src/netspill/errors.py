"""Exception types shared across the estimation pipeline."""


class NetspillError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(NetspillError, ValueError):
    """Input data violates a structural requirement."""


class ParseError(ValidationError):
    """A data file could not be parsed.

    Carries the offending line number when known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class UniquenessError(NetspillError, ValueError):
    """Spillover coefficient too large for the contraction argument."""


class ConvergenceError(NetspillError, RuntimeError):
    """An iterative routine hit its iteration ceiling."""

    def __init__(self, message, residual=None, trace=None):
        self.residual = residual
        self.trace = trace
        super().__init__(message)


class IdentificationError(NetspillError, ValueError):
    """A rank condition needed for identification fails."""
