"""Exception categories surfaced by the library and mapped to CLI exit codes."""


class SpatioformerError(Exception):
    exit_code = 1


class ConfigError(SpatioformerError, ValueError):
    exit_code = 3


class DataError(SpatioformerError, ValueError):
    exit_code = 4


class NumericError(SpatioformerError, ArithmeticError):
    exit_code = 5
