"""Exception hierarchy shared by every module; the CLI maps these to exit codes."""


class SNetError(Exception):
    exit_code = 1


class ConfigError(SNetError, ValueError):
    exit_code = 2


class UsageError(SNetError, ValueError):
    exit_code = 2


class DataError(SNetError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed tensor or checkpoint file; carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(DataError):
    pass


class NumericError(SNetError, ArithmeticError):
    exit_code = 4


class GraphError(SNetError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, reused graph)."""

    exit_code = 1
