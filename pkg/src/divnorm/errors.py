"""Exception hierarchy shared across the package."""


class DivNormError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DivNormError, ValueError):
    pass


class DegenerateBatchError(DivNormError, ValueError):
    pass


class NotPositiveDefiniteError(DivNormError, ValueError):
    pass


class UninitializedStatsError(DivNormError, RuntimeError):
    pass


class ContractViolation(DivNormError, ValueError):
    """Shape or range precondition broken by the caller."""


class ConfigError(DivNormError, ValueError):
    pass


class ParseError(DivNormError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonFiniteError(DivNormError, FloatingPointError):
    pass
