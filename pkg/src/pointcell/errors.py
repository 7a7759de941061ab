"""Exception types shared across the package."""


class PointcellError(Exception):
    """Base class for all package errors."""


class ShapeError(PointcellError):
    """Tensor or array dimensions are inconsistent with the operation."""


class ContractError(PointcellError):
    """A call violated an API precondition."""


class NumericError(PointcellError):
    """A computation produced non-finite values or is numerically invalid."""


class InfeasibleError(PointcellError):
    """Requested configuration cannot be satisfied (e.g. scene too dense)."""


class ValidationError(PointcellError):
    """Persisted data or configuration failed validation."""


class ConfigError(PointcellError):
    """A config file or override is malformed."""
