"""Deterministic line-graph rasterization of irregular multivariate series.

Each variable is drawn in its own grid cell: observations become 5x5 star
stamps, consecutive observations are joined by 1-px integer lines, and cells
are composed row-major into one RGB image. No anti-aliasing is applied, so
the output is a pure function of its inputs.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, Sample
from .errors import RasterError
from .image import BACKGROUND, ImageBuffer

# tab10 followed by its light companions
DEFAULT_PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
    (174, 199, 232), (255, 187, 120), (152, 223, 138), (255, 152, 150), (197, 176, 213),
    (196, 156, 148), (247, 182, 210), (199, 199, 199), (219, 219, 141), (158, 218, 229),
)

# center, 4 orthogonal and 4 diagonal arms of length 2
STAR_OFFSETS = np.array(
    [(0, 0)]
    + [(k * dx, k * dy) for k in (1, 2) for dx, dy in
       ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))],
    dtype=np.int64,
)

STRATEGIES = ("default", "iqr", "sd", "mzs")


@dataclass(frozen=True)
class LimitStrategy:
    tag: str = "default"
    iqr_k: float = 1.5
    sd_k: float = 3.0
    mzs_threshold: float = 3.5

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise RasterError(f"unknown limit strategy {self.tag!r}; choose from {STRATEGIES}")
        if min(self.iqr_k, self.sd_k, self.mzs_threshold) <= 0:
            raise RasterError("limit strategy parameters must be strictly positive")


@dataclass
class AxisLimits:
    t_min: float
    t_max: float
    y: list  # (y_min, y_max) per variable
    degenerate: list = field(default_factory=list)

    def __post_init__(self):
        if not self.degenerate:
            self.degenerate = [False] * len(self.y)
        vals = [self.t_min, self.t_max, *(v for pair in self.y for v in pair)]
        if not all(math.isfinite(v) for v in vals):
            raise RasterError("axis limits must be finite")
        if self.t_min > self.t_max or any(lo > hi for lo, hi in self.y):
            raise RasterError("axis limits must satisfy min <= max")


@dataclass(frozen=True)
class GridLayout:
    rows: int
    cols: int

    @property
    def cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class RenderConfig:
    cell_px: tuple = (64, 64)
    line_width: int = 1
    marker: bool = True
    interpolate: bool = True
    palette: tuple = DEFAULT_PALETTE
    background: tuple = BACKGROUND
    oob: str = "clamp"
    image_size: tuple | None = None  # final (H, W) override

    def __post_init__(self):
        if self.cell_px[0] < 8 or self.cell_px[1] < 8:
            raise RasterError(f"cell size must be at least 8x8, got {self.cell_px}")
        if self.line_width != 1:
            raise RasterError("only 1-px lines are supported")
        if not self.palette:
            raise RasterError("palette must not be empty")
        if len(set(map(tuple, self.palette))) != len(self.palette):
            raise RasterError("palette entries must be pairwise distinct")
        if tuple(self.background) in set(map(tuple, self.palette)):
            raise RasterError("palette must not contain the background color")
        if self.oob not in ("clamp", "clip"):
            raise RasterError(f"oob must be 'clamp' or 'clip', got {self.oob!r}")

    def cell_size(self, layout: GridLayout) -> tuple:
        if self.image_size is None:
            return tuple(self.cell_px)
        H, W = self.image_size
        h, w = H // layout.rows, W // layout.cols
        if h < 8 or w < 8:
            raise RasterError(f"image size {self.image_size} too small for a {layout.rows}x{layout.cols} grid")
        return (h, w)

    def color(self, d: int) -> tuple:
        return tuple(self.palette[d % len(self.palette)])


def grid_layout(D: int) -> GridLayout:
    """Near-square grid: l x l if l(l-1) < D <= l^2, else l x (l+1)."""
    if D < 1:
        raise RasterError(f"need at least one variable, got D={D}")
    l = math.isqrt(D - 1) + 1  # ceil(sqrt(D))
    if D <= l * (l - 1):
        return GridLayout(l - 1, l)
    return GridLayout(l, l)


def fit_axis_limits(dataset: Dataset, train_indices: Sequence[int], strategy=LimitStrategy()) -> AxisLimits:
    """Fit per-variable value ranges and the global time range on training samples."""
    if isinstance(strategy, str):
        strategy = LimitStrategy(strategy)
    D = dataset.num_variables
    values = [[] for _ in range(D)]
    t_lo, t_hi = math.inf, -math.inf
    for i in train_indices:
        s = dataset.samples[i]
        for d, obs in enumerate(s.series):
            if obs:
                t_lo = min(t_lo, obs[0].time)
                t_hi = max(t_hi, obs[-1].time)
                values[d].extend(o.value for o in obs)
    if t_lo > t_hi:
        t_lo, t_hi = 0.0, 1.0
    ys, flags = [], []
    for vals in values:
        lo, hi, degenerate = strategy_limits(np.asarray(vals, dtype=np.float64), strategy)
        ys.append((lo, hi))
        flags.append(degenerate)
    return AxisLimits(float(t_lo), float(t_hi), ys, flags)


def strategy_limits(values: np.ndarray, strategy: LimitStrategy) -> tuple:
    """(lo, hi, degenerate) for one variable's observed values."""
    if values.size == 0:
        return 0.0, 1.0, True
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        return vmin - 0.5, vmax + 0.5, False
    if strategy.tag == "default":
        lo, hi = vmin, vmax
    elif strategy.tag == "iqr":
        q1, q3 = np.quantile(values, [0.25, 0.75], method="linear")
        iqr = q3 - q1
        lo, hi = q1 - strategy.iqr_k * iqr, q3 + strategy.iqr_k * iqr
    elif strategy.tag == "sd":
        mu = float(np.mean(values))
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        lo, hi = mu - strategy.sd_k * sd, mu + strategy.sd_k * sd
    else:
        med = float(np.median(values))
        mad = float(np.median(np.abs(values - med)))
        half = strategy.mzs_threshold * mad / 0.6745
        lo, hi = med - half, med + half
    return max(float(lo), vmin), min(float(hi), vmax), False


def save_limits(limits: AxisLimits, variable_names: Sequence[str], path, comment: str | None = None) -> None:
    if len(variable_names) != len(limits.y):
        raise RasterError("variable name count does not match limits")
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable", "y_min", "y_max"])
    for name, (lo, hi) in zip(variable_names, limits.y):
        w.writerow([name, repr(float(lo)), repr(float(hi))])
    w.writerow(["__time__", repr(float(limits.t_min)), repr(float(limits.t_max))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_limits(path) -> tuple:
    """Returns ``(AxisLimits, variable_names)``."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0] != ["variable", "y_min", "y_max"]:
        raise RasterError(f"{path}: missing 'variable,y_min,y_max' header")
    names, ys, t = [], [], None
    for row in rows[1:]:
        if len(row) != 3:
            raise RasterError(f"{path}: malformed row {row!r}")
        try:
            lo, hi = float(row[1]), float(row[2])
        except ValueError:
            raise RasterError(f"{path}: non-numeric limits in row {row!r}") from None
        if row[0] == "__time__":
            t = (lo, hi)
        else:
            names.append(row[0])
            ys.append((lo, hi))
    if t is None:
        raise RasterError(f"{path}: missing __time__ row")
    return AxisLimits(t[0], t[1], ys), names


def _fractions(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    with np.errstate(over="ignore", invalid="ignore"):
        if span == 0:
            return np.where(x < lo, 0.0, np.where(x > hi, 1.0, 0.5))
        if math.isfinite(span):
            frac = (x - lo) / span
        else:
            frac = (x / 2 - lo / 2) / (hi / 2 - lo / 2)
    return np.nan_to_num(frac, nan=0.5, posinf=1.0, neginf=0.0)


def pixel_coords(times, values, y_limits, t_limits, h: int, w: int, oob: str = "clamp"):
    """Integer (px, py) anchors for observations; clip mode drops out-of-limit points."""
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    ft = _fractions(t, *t_limits)
    fv = _fractions(v, *y_limits)
    if oob == "clip":
        keep = (ft >= 0) & (ft <= 1) & (fv >= 0) & (fv <= 1)
        ft, fv = ft[keep], fv[keep]
    ft = np.clip(ft, 0.0, 1.0)
    fv = np.clip(fv, 0.0, 1.0)
    px = np.floor(ft * (w - 1) + 0.5).astype(np.int64)
    py = (h - 1) - np.floor(fv * (h - 1) + 0.5).astype(np.int64)
    return px, py


def line_pixels(x0, y0, x1, y1) -> tuple:
    """Integer 1-px lines between endpoint arrays, endpoints included.

    Steps one pixel along the major axis; the minor coordinate is the ideal
    line's value rounded half-up, computed in exact integer arithmetic.
    """
    x0, y0, x1, y1 = (np.atleast_1d(np.asarray(a, dtype=np.int64)) for a in (x0, y0, x1, y1))
    dx, dy = x1 - x0, y1 - y0
    n = np.maximum(np.abs(dx), np.abs(dy))
    counts = n + 1
    seg = np.repeat(np.arange(n.size), counts)
    starts = np.cumsum(counts) - counts
    i = np.arange(counts.sum()) - np.repeat(starts, counts)
    nn = np.maximum(n[seg], 1)
    two_n = 2 * nn
    xs = x0[seg] + np.sign(dx[seg]) * ((2 * i * np.abs(dx[seg]) + nn) // two_n)
    ys = y0[seg] + np.sign(dy[seg]) * ((2 * i * np.abs(dy[seg]) + nn) // two_n)
    return xs, ys


def render_cell(series, y_limits, t_limits, color, config: RenderConfig = RenderConfig(),
                cell_px: tuple | None = None) -> np.ndarray:
    """Draw one variable's line graph into an (h, w, 3) uint8 block."""
    h, w = cell_px if cell_px is not None else config.cell_px
    block = np.empty((h, w, 3), dtype=np.uint8)
    block[...] = config.background
    if isinstance(series, tuple) and len(series) == 2 and isinstance(series[0], np.ndarray):
        times, values = series
    else:
        arr = np.asarray(series, dtype=np.float64).reshape(-1, 2)
        times, values = arr[:, 0], arr[:, 1]
    if len(times) == 0:
        return block
    px, py = pixel_coords(times, values, y_limits, t_limits, h, w, config.oob)
    if px.size == 0:
        return block
    ink_x, ink_y = [], []
    if config.interpolate and px.size > 1:
        lx, ly = line_pixels(px[:-1], py[:-1], px[1:], py[1:])
        ink_x.append(lx)
        ink_y.append(ly)
    if config.marker:
        sx = (px[:, None] + STAR_OFFSETS[None, :, 0]).ravel()
        sy = (py[:, None] + STAR_OFFSETS[None, :, 1]).ravel()
        inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
        ink_x.append(sx[inside])
        ink_y.append(sy[inside])
    if ink_x:
        block[np.concatenate(ink_y), np.concatenate(ink_x)] = color
    return block


def render_sample(sample: Sample, limits: AxisLimits, layout: GridLayout, order: Sequence[int],
                  config: RenderConfig = RenderConfig()) -> ImageBuffer:
    D = sample.num_variables
    if layout.cells < D:
        raise RasterError(f"layout {layout.rows}x{layout.cols} too small for {D} variables")
    if sorted(order) != list(range(D)):
        raise RasterError("order must be a permutation of the variable indices")
    h, w = config.cell_size(layout)
    image = ImageBuffer.blank(layout.rows * h, layout.cols * w, config.background)
    t_limits = (limits.t_min, limits.t_max)
    for pos, d in enumerate(order):
        r, c = divmod(pos, layout.cols)
        block = render_cell(sample.arrays(d), limits.y[d], t_limits, config.color(d), config, (h, w))
        image.pixels[r * h:(r + 1) * h, c * w:(c + 1) * w] = block
    return image


def render_many(samples: Sequence[Sample], limits: AxisLimits, layout: GridLayout, order: Sequence[int],
                config: RenderConfig = RenderConfig(), threads: int = 1) -> list:
    """Render samples in input order; output is identical for any thread count."""
    if threads <= 1 or len(samples) < 2:
        return [render_sample(s, limits, layout, order, config) for s in samples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: render_sample(s, limits, layout, order, config), samples))
