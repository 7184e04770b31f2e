"""Exception types shared across the package."""


class SemandError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(SemandError):
    """Input coordinate outside the supported projection domain."""


class GeometryError(SemandError):
    """Degenerate or invalid vector geometry."""


class DataError(SemandError):
    """Raster data violates a channel contract (NaN, negative counts, ...)."""


class AlignmentError(SemandError):
    """Channels from different grids cannot be fused."""


class EmptyTileError(SemandError):
    """Tile has no polygons to augment."""


class UndefinedPosednessError(SemandError):
    """Posedness is undefined for an all-zero normal raster."""


class RejectionExhaustedError(SemandError):
    """Acceptance-rejection loop hit its attempt cap."""


class NormalizationError(SemandError):
    """A zero-norm feature vector cannot be normalized."""


class ConfigError(SemandError):
    """Invalid configuration value or combination."""


class CheckpointError(SemandError):
    """Checkpoint file is corrupt or belongs to a different model config."""


class TrainingError(SemandError):
    """Training aborted (non-finite loss or similar)."""


class InsufficientDataError(SemandError):
    """Not enough samples to fit the requested statistic."""


class EvaluationError(SemandError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""
