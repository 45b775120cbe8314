"""Exception types shared across the package.

The CLI maps each family onto a process exit code: configuration problems
exit with 2, data/format problems with 3 and numeric divergence with 4.
"""


class DSXError(Exception):
    exit_code = 1


class ConfigError(DSXError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class DataError(DSXError, ValueError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DSXError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass
