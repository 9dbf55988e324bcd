"""Exception types shared across the package."""


class AsConvSRError(Exception):
    """Base class for all package errors."""


class ShapeError(AsConvSRError):
    """Array shape, dtype, or axis arguments are inconsistent."""


class ConfigError(AsConvSRError):
    """Invalid configuration value or combination."""


class DataError(AsConvSRError):
    """Problem with an image file or dataset layout."""


class CheckpointError(AsConvSRError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class NumericError(AsConvSRError):
    """A computation produced non-finite values or otherwise failed numerically."""
