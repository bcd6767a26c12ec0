"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, thresholds, or settings that make an operation ill-posed."""


class NumericError(RuntimeError):
    """A forward computation produced NaN or Inf."""


class UsageError(RuntimeError):
    """An API was called out of contract (e.g. backward on a non-scalar)."""


class DataError(ValueError):
    """Input data violates its declared value range or file format."""
