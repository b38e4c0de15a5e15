"""Exception hierarchy shared by every module."""


class MVCLError(Exception):
    """Base class; ``code`` is the short machine-readable reason used by the CLI."""

    code = "error"


class DimensionError(MVCLError, ValueError):
    code = "dimension"


class ParameterError(MVCLError, ValueError):
    code = "parameter"


class DomainError(MVCLError, ValueError):
    code = "domain"


class NumericError(MVCLError, ArithmeticError):
    code = "numeric"


class DataError(MVCLError, ValueError):
    code = "data"


class RangeError(MVCLError, ValueError):
    code = "range"


class ConfigError(MVCLError, ValueError):
    """Invalid configuration; message starts with the offending field path."""

    code = "config"

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SchemaError(MVCLError, ValueError):
    code = "schema"
