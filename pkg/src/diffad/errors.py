"""Exception hierarchy. Each class maps onto one CLI exit code."""


class DiffadError(Exception):
    exit_code = 1


class ShapeError(DiffadError, ValueError):
    exit_code = 5


class ContractError(DiffadError, ValueError):
    exit_code = 5


class ConfigError(DiffadError, ValueError):
    exit_code = 2


class FormatError(DiffadError, ValueError):
    """Malformed or truncated input file."""

    exit_code = 3


class FitError(DiffadError, ValueError):
    exit_code = 5


class SplitError(DiffadError, ValueError):
    exit_code = 5


class MetricError(DiffadError, ValueError):
    exit_code = 5


class NumericError(DiffadError, ArithmeticError):
    exit_code = 4


class ParseError(FormatError):
    """Malformed text input; the message names the offending line."""
