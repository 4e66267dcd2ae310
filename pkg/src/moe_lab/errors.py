"""Exception hierarchy.

Each class carries the process exit code the command line uses for it.
"""


class MoELabError(Exception):
    exit_code = 1


class UsageError(MoELabError, ValueError):
    exit_code = 2


class ConfigError(MoELabError, ValueError):
    exit_code = 3


class FormatError(MoELabError, ValueError):
    exit_code = 4


class NumericError(MoELabError, ArithmeticError):
    exit_code = 5


class InternalError(MoELabError, RuntimeError):
    exit_code = 1
