"""Exception types shared across the package.

The CLI maps the three root types to exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(Exception):
    """Bad or inconsistent run configuration."""


class DataError(Exception):
    """Broken input data: images, manifests, checkpoints, datasets."""


class NumericError(Exception):
    """A forward computation produced NaN or Inf."""


class ImageFormatError(DataError):
    """Unsupported image format or bit depth."""


class ImageDecodeError(DataError):
    """File exists but cannot be decoded (truncated, corrupt)."""


class ManifestError(DataError):
    """Manifest violates the pairing schema."""


class CheckpointError(DataError):
    """Checkpoint file cannot be used."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the architecture."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file is shorter than its header claims or fails the CRC."""
