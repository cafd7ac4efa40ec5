"""Fault taxonomy shared across modules and mapped onto CLI exit codes."""


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Dataset, split, or manifest problem (CLI exit code 3)."""


class NumericError(ArithmeticError):
    """Non-finite loss or gradient during optimization (CLI exit code 4)."""
