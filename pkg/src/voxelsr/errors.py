"""Exception types shared across the package."""


class VoxelSRError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(VoxelSRError, ValueError):
    """Array shapes are inconsistent; the message names the offending axes."""


class NonFiniteError(VoxelSRError, FloatingPointError):
    """A NaN or Inf was found where finite values are required."""


class ConfigError(VoxelSRError, ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(VoxelSRError, ValueError):
    """Invalid volume, mask, patch or file content."""
