class CapsedError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(CapsedError, ValueError):
    pass


class DataError(CapsedError, ValueError):
    """Malformed or inconsistent input data (audio, annotations, manifests)."""


class ConfigError(CapsedError, ValueError):
    pass


class NumericError(CapsedError, FloatingPointError):
    """A computation produced NaN or Inf."""
