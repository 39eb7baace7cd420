"""Line-graph imaging and shifted-window transformer classification for irregular time series."""

from .dataset import Dataset, Observation, Sample, SplitSpec, load_dataset, make_splits, write_dataset
from .errors import VitstError
from .image import ImageBuffer, decode_ppm, encode_ppm
from .raster import AxisLimits, GridLayout, LimitStrategy, RenderConfig, grid_layout, render_sample
from .swin import ModelConfig, SwinClassifier
from .synth import synth_generate

__version__ = "0.1.0"
