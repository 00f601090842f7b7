"""Exception taxonomy.

Validation failures (bad config, bad geometry, malformed files) raise
SpadnetError subclasses and map to CLI exit code 1; anything else that
escapes a command is a runtime failure and maps to exit code 2.
"""


class SpadnetError(Exception):
    """Base class for all validation errors raised by this package."""


class GeometryError(SpadnetError):
    """Invalid voxel spacing or anisotropy arithmetic."""


class DimensionError(SpadnetError):
    """Tensor or volume shape incompatible with the requested operation."""


class AdaptationError(SpadnetError):
    """Convolution spec cannot be adapted for the given anisotropy."""


class PlanError(SpadnetError):
    """Network plan construction or validation failed."""


class ConfigError(SpadnetError):
    """Invalid command or training configuration."""


class DataError(SpadnetError):
    """Malformed volume file, sidecar, or dataset index."""


class MetricError(SpadnetError):
    """Metric inputs invalid (shape mismatch, non-finite spacing)."""


class CapabilityError(SpadnetError):
    """Requested an operation outside the supported primitive set."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during a training run."""
