"""Exception hierarchy shared by every stage of the pipeline."""


class VitstError(Exception):
    """Base class; the CLI turns these into one-line error reports."""

    kind = "error"


class DatasetError(VitstError):
    kind = "dataset"


class RasterError(VitstError):
    kind = "raster"


class ImageFormatError(VitstError):
    kind = "image"


class AugmentError(VitstError):
    kind = "augment"


class ShapeError(VitstError, ValueError):
    kind = "shape"


class TapeError(VitstError, RuntimeError):
    kind = "tape"


class ModelError(VitstError):
    kind = "model"


class CheckpointError(VitstError):
    kind = "checkpoint"


class MetricError(VitstError, ValueError):
    kind = "metric"


class TrainingDiverged(VitstError, RuntimeError):
    kind = "diverged"


class ConfigError(VitstError):
    kind = "config"
