"""Synthetic irregular multivariate series with class-dependent shape."""

from __future__ import annotations

import numpy as np

from .dataset import Dataset, make_sample
from .errors import DatasetError


def synth_generate(n: int, D: int, classes: int = 2, drop_ratio: float = 0.6, seed: int = 0,
                   grid: int = 50, span: float = 48.0) -> Dataset:
    """Draw ``n`` samples of ``D`` variables on a jittered ``grid``-point time axis.

    Class ``c`` oscillates with ``2c + 1`` cycles over the span (shifted per
    variable) and carries a class-signed linear trend. Each observation is then
    kept independently with probability ``1 - drop_ratio``. Labels are
    ``i % classes`` shuffled, so class sizes differ by at most one.
    """
    if n < 1 or D < 1 or classes < 1 or grid < 2 or span <= 0:
        raise DatasetError("synth_generate needs positive n, D, classes, span and grid >= 2")
    if not 0.0 <= drop_ratio < 1.0:
        raise DatasetError(f"drop_ratio must lie in [0, 1), got {drop_ratio}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    step = span / (grid - 1)
    base = np.arange(grid) * step
    samples = []
    for i in range(n):
        c = int(labels[i])
        times = base + rng.uniform(-0.3, 0.3, size=grid) * step
        times[0], times[-1] = 0.0, span
        phase = rng.uniform(0, 2 * np.pi)
        trend = (1.0 if c % 2 == 0 else -1.0) * (0.5 + 0.25 * (c // 2))
        series = []
        for d in range(D):
            freq = (2 * c + 1 + 0.25 * (d % 3)) / span
            vals = (np.sin(2 * np.pi * freq * times + phase + d)
                    + trend * (times / span - 0.5)
                    + rng.normal(0, 0.1, size=grid)) * (1.0 + d) + 10.0 * d
            keep = rng.random(grid) >= drop_ratio
            series.append(list(zip(np.round(times[keep], 6).tolist(), vals[keep].tolist())))
        samples.append(make_sample(f"s{i:05d}", series, c))
    names = [f"var{d}" for d in range(D)]
    return Dataset(samples, names, classes, None)
