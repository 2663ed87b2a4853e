"""Exception types; each maps onto a CLI exit code."""


class PartContrastError(Exception):
    exit_code = 1


class ConfigError(PartContrastError, ValueError):
    exit_code = 2


class DataError(PartContrastError, ValueError):
    exit_code = 3


class NumericFailure(PartContrastError, RuntimeError):
    """Raised when a training loss or parameter becomes non-finite."""

    exit_code = 4

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
