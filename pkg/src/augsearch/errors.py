"""Exception hierarchy. Each family maps to a CLI exit code."""


class AugSearchError(Exception):
    exit_code = 1


class ConfigError(AugSearchError, ValueError):
    """Invalid configuration or argument."""

    exit_code = 2


class DataFormatError(AugSearchError):
    """Malformed or unreadable dataset / checkpoint / policy file."""

    exit_code = 3


class PolicyLoadError(DataFormatError):
    pass


class NumericError(AugSearchError, ArithmeticError):
    """Non-finite values, degenerate gradients, divergence."""

    exit_code = 4


class DegenerateGradientError(NumericError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, *, epoch=None, step=None, last_loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.last_loss = last_loss
