"""Exception types shared across the package."""


class NvsError(Exception):
    """Base class for all nvs3d errors."""


class InvalidThresholdError(NvsError):
    """Binarization threshold outside the open interval (0, 1)."""


class DimensionMismatchError(NvsError):
    """Operands have incompatible resolutions or tensor shapes."""


class FormatError(NvsError):
    """Malformed .vxg / .nvsm payload or manifest."""


class CheckpointMismatchError(FormatError):
    """Checkpoint tensors do not match the current model configuration."""


class UnknownViewError(NvsError):
    """A viewpoint was referenced that is not a member of the sphere."""


class NoAvailableViewError(NvsError):
    """Availability mask excludes every viewpoint."""


class GenerationError(NvsError):
    """Shape generator failed to satisfy its invariants after retries."""


class NonScalarLossError(NvsError):
    """backward() called on a tensor that is not a scalar."""


class MissingGradError(NvsError):
    """Optimizer stepped over a parameter whose gradient is unset."""


class TrainingDivergedError(NvsError):
    """Loss became NaN/Inf; message carries step index and sample ids."""


class ConfigError(NvsError):
    """Inconsistent or unsupported configuration."""
