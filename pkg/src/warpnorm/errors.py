"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not agree with an operation's contract."""


class ContractError(ValueError):
    """An input violates a value-level precondition (range, binarity, ...)."""


class ConfigError(ValueError):
    """A scene, model or experiment configuration is invalid."""


class TrainingAborted(RuntimeError):
    """Raised when a loss term goes non-finite or training diverges."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
