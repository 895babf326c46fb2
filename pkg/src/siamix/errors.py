"""Exception types shared across the package.

The CLI maps these onto exit codes, so keep the hierarchy flat.
"""


class SiamixError(Exception):
    """Base class for all package errors."""


class ShapeError(SiamixError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(SiamixError, ValueError):
    """A precondition of a public operation was violated."""


class ConfigError(SiamixError, ValueError):
    """Unknown variant, malformed config file or invalid hyperparameters."""


class DataError(SiamixError, ValueError):
    """Unreadable, inconsistent or out-of-range input data."""


class NumericError(SiamixError, ArithmeticError):
    """NaN/Inf encountered during training or gradient checking."""
