"""Exception types shared across the package."""


class MuleError(Exception):
    """Base class for every error raised by mlmule."""


class ConfigError(MuleError, ValueError):
    """Invalid configuration or geometry.

    ``key`` names the offending configuration key when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ContractError(MuleError, ValueError):
    """A precondition of an operation was violated (shape mismatch, empty input...)."""


class ValidationError(MuleError, ValueError):
    """Input data is well formed but semantically invalid."""


class TraceParseError(MuleError, ValueError):
    def __init__(self, message, lineno):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EvaluationError(MuleError, ValueError):
    pass
