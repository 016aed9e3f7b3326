"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericsError -> 3.
"""


class NotecoderError(Exception):
    """Base class for all package errors."""


class ConfigError(NotecoderError):
    """Invalid configuration: bad key, bad value, inconsistent settings."""


class DataError(NotecoderError):
    """Malformed or missing input data or artifacts."""


class NumericsError(NotecoderError):
    """Numerical failure: NaN/Inf values where finite values are required."""


class ShapeError(NotecoderError):
    """Tensor shape mismatch; the message names the offending shapes."""


class CheckpointError(DataError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ends before all declared payload bytes."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shapes disagree with the requested model config."""
