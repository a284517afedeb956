"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and StageError to exit code 3;
everything else is a plain failure.
"""


class NeuronsError(Exception):
    """Base class for package errors."""


class ConfigError(NeuronsError):
    """Invalid, unknown, or out-of-range configuration."""


class ShapeError(NeuronsError, ValueError):
    """Tensor/array shape does not match the contract."""


class DataFormatError(NeuronsError):
    """On-disk artifact is malformed (bad magic, truncated, wrong dtype)."""


class IntegrityError(DataFormatError):
    """Checksum or lineage verification failed."""


class StateError(NeuronsError):
    """Operation invoked on an object in the wrong state."""


class TrainingDiverged(NeuronsError):
    """A loss became non-finite; training aborted."""


class StageError(NeuronsError):
    """A pipeline stage failed."""


class BackendError(NeuronsError):
    """A pluggable backend failed or is not available."""


class ReconstructionError(StageError):
    """Video reconstruction failed after conditioning was assembled.

    Carries the partially built conditioning bundle so callers can persist
    it for debugging.
    """

    def __init__(self, message, bundle=None):
        super().__init__(message)
        self.bundle = bundle
