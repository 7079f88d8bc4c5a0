"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""


class MGCNError(Exception):
    exit_code = 1


class ConfigError(MGCNError, ValueError):
    exit_code = 2


class DimensionError(MGCNError, ValueError):
    exit_code = 2


class UsageError(MGCNError, ValueError):
    exit_code = 2


class DegenerateError(MGCNError, ValueError):
    """An input has no valid entries to operate on (empty graph, fully masked slice)."""

    exit_code = 4


class DataFormatError(MGCNError):
    exit_code = 3


class NumericError(MGCNError):
    exit_code = 4
