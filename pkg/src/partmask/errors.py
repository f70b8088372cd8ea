"""Exception types shared across the package, mapped to CLI exit codes."""


class PartmaskError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(PartmaskError):
    """Operand shapes are incompatible with an operation's contract."""


class ConfigError(PartmaskError):
    """Invalid configuration value (CLI exit code 2)."""


class DataError(PartmaskError):
    """Missing or malformed data file (CLI exit code 3)."""


class ContractError(PartmaskError):
    """A documented precondition was violated by the caller."""


class NumericError(PartmaskError):
    """Numeric failure: non-finite loss, zero-norm rows, ... (exit code 4)."""
