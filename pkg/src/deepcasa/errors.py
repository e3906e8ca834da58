"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are inconsistent with an operation."""


class ParameterError(ValueError):
    """A hyper-parameter is outside its valid range."""


class UsageError(RuntimeError):
    """An API was called in a state where it is not allowed."""


class NumericError(ArithmeticError):
    """Non-finite values were produced or consumed."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


class SizingError(ValueError):
    """An input is too small for the network's total shrinkage."""


class ConsistencyError(RuntimeError):
    """A forward pass drifted from its precomputed shape plan."""
