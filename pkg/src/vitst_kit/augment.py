"""Training-time cutout, evaluation-time sensor dropping, and MIM column masks."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import Sample
from .errors import AugmentError
from .image import BACKGROUND, ImageBuffer
from .raster import GridLayout


def cutout_boxes(height: int, width: int, n_regions: int, size: int, rng: np.random.Generator) -> list:
    """Top-left corners (y, x) of ``n_regions`` uniformly placed squares."""
    if size > height or size > width:
        raise AugmentError(f"cutout region {size}x{size} larger than image {height}x{width}")
    ys = rng.integers(0, height - size + 1, size=n_regions)
    xs = rng.integers(0, width - size + 1, size=n_regions)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def cutout(image: ImageBuffer, rng: np.random.Generator, n_regions: int = 16, size: int = 16,
           fill=BACKGROUND) -> ImageBuffer:
    """Blank ``n_regions`` random ``size`` x ``size`` squares with the background color.

    Squares may overlap and straddle cell borders. The input is not modified.
    """
    out = image.copy()
    for y, x in cutout_boxes(image.height, image.width, n_regions, size, rng):
        out.pixels[y:y + size, x:x + size] = fill
    return out


@dataclass(frozen=True)
class SensorMaskSpec:
    mode: str = "fixed"
    fixed_set: tuple = ()
    ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "random"):
            raise AugmentError(f"sensor mask mode must be 'fixed' or 'random', got {self.mode!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise AugmentError(f"ratio must lie in [0, 1], got {self.ratio}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "fixed_set": list(self.fixed_set), "ratio": self.ratio, "seed": self.seed}


def num_dropped(ratio: float, D: int) -> int:
    # tolerance guards ratios like 0.3 * 10 = 3.0000000000000004
    return int(math.ceil(ratio * D - 1e-9))


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Per-sample generator, independent of processing order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(sample_id.encode("utf-8"))])


def drop_sensors(sample: Sample, spec: SensorMaskSpec) -> Sample:
    """Empty the observation lists of the selected variables."""
    D = sample.num_variables
    if spec.mode == "fixed":
        chosen = set(spec.fixed_set)
        if any(not 0 <= d < D for d in chosen):
            raise AugmentError(f"fixed_set {sorted(chosen)} outside 0..{D - 1}")
        if len(chosen) >= D:
            raise AugmentError("dropping every sensor leaves nothing to classify")
    else:
        k = num_dropped(spec.ratio, D)
        if k >= D:
            raise AugmentError(f"ratio {spec.ratio} drops all {D} sensors")
        rng = sample_rng(spec.seed, sample.id)
        chosen = set(int(d) for d in rng.choice(D, size=k, replace=False)) if k else set()
    if not chosen:
        return sample
    return sample.with_series(() if d in chosen else obs for d, obs in enumerate(sample.series))


def fixed_drop_set(D: int, ratio: float, seed: int) -> tuple:
    """Seeded fixed sensor set of size ceil(ratio * D); sets for growing ratios are nested."""
    k = num_dropped(ratio, D)
    if k >= D:
        raise AugmentError(f"ratio {ratio} drops all {D} sensors")
    perm = np.random.default_rng(seed).permutation(D)
    return tuple(sorted(int(d) for d in perm[:k]))


@dataclass
class MimMask:
    grid: np.ndarray  # (H/patch, W/patch) bool
    patch_size: int
    masked_count: int = field(init=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        self.masked_count = int(self.grid.sum())

    def pixel_mask(self) -> np.ndarray:
        """(H, W) bool mask at pixel resolution."""
        p = self.patch_size
        return np.repeat(np.repeat(self.grid, p, axis=0), p, axis=1)


def mim_mask(layout: GridLayout, cell_px: tuple, patch_size: int, rng: np.random.Generator,
             col_width: int = 32, ratio: float = 0.5) -> MimMask:
    """Mask whole-cell-height column bands, each chosen independently with probability ``ratio``."""
    cell_h, cell_w = cell_px
    if col_width % patch_size:
        raise AugmentError(f"column width {col_width} not divisible by patch size {patch_size}")
    if cell_w % col_width:
        raise AugmentError(f"cell width {cell_w} not divisible by column width {col_width}")
    if cell_h % patch_size:
        raise AugmentError(f"cell height {cell_h} not divisible by patch size {patch_size}")
    bands_per_cell = cell_w // col_width
    band_patches = col_width // patch_size
    rows_per_cell = cell_h // patch_size
    chosen = rng.random((layout.rows, layout.cols, bands_per_cell)) < ratio
    # expand: bands -> patch columns, cells -> patch rows
    cols = np.repeat(chosen, band_patches, axis=2).reshape(layout.rows, layout.cols * bands_per_cell * band_patches)
    grid = np.repeat(cols, rows_per_cell, axis=0)
    return MimMask(grid, patch_size)
