"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and its
subclasses) -> 2, NumericError -> 3.
"""


class FlowcalError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowcalError):
    """Invalid configuration or command usage."""


class DataError(FlowcalError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """Syntactic problem in an input file, with a location."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    """Semantically invalid data (out-of-range values, bad references)."""


class NumericError(FlowcalError):
    """Numerical failure (divergence, non-finite intermediate)."""
