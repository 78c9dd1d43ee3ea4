"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code (see ``mstl.cli``).
"""


class MSTLError(Exception):
    exit_code = 1


class ConfigError(MSTLError):
    exit_code = 2


class ResolutionError(ConfigError):
    """A config cross-reference (dataset, checkpoint, stage) does not resolve."""

    exit_code = 3


class NumericError(MSTLError, ArithmeticError):
    exit_code = 4


class DimensionError(MSTLError, ValueError):
    exit_code = 5


class InputError(MSTLError, ValueError):
    exit_code = 5


class DataError(MSTLError):
    exit_code = 6


class FormatError(MSTLError):
    exit_code = 7

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ComparisonError(MSTLError):
    exit_code = 8


class GradientCheckError(MSTLError, AssertionError):
    exit_code = 9
