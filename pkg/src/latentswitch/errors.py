"""Error types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class LatentSwitchError(Exception):
    exit_code = 1


class InputError(LatentSwitchError, ValueError):
    exit_code = 2


class DataError(LatentSwitchError, ValueError):
    exit_code = 3


class CapacityError(LatentSwitchError):
    exit_code = 4


class NumericError(LatentSwitchError, ArithmeticError):
    exit_code = 5


class ConfigError(LatentSwitchError, ValueError):
    exit_code = 6
