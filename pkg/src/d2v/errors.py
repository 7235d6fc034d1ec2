"""Exception hierarchy shared by every module.

Each class carries the process exit status the CLI reports for it.
"""


class D2VError(Exception):
    exit_code = 1


class ConfigError(D2VError, ValueError):
    exit_code = 2


class InputError(D2VError, ValueError):
    exit_code = 3


class NumericError(D2VError, ArithmeticError):
    exit_code = 4


class StateError(D2VError, RuntimeError):
    exit_code = 5
