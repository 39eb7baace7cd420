"""Canonical data model for irregularly sampled multivariate time series.

A dataset file is newline-delimited JSON: one header record followed by one
record per sample::

    {"variables": [...], "num_classes": C, "static_schema": [...]}
    {"id": "...", "label": 0, "static": {...}, "series": [[[t, v], ...], ...]}

Every per-variable sequence must be strictly increasing in time once sorted;
equal timestamps within one variable are rejected at load time.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DatasetError

P12_TEMPLATE = (
    "A patient is {Age} years old, {Gender}, {Height} cm, {Weight} kg, stayed in {ICUType}."
)
P19_TEMPLATE = (
    "A patient is {Age} years old, {Gender}, went to {Unit1&Unit2} {HospAdmTime} hours "
    "after hospital admit, had stayed there for {ICULOS} hours."
)


class Observation(NamedTuple):
    time: float
    value: float



@dataclass(frozen=True)
class Sample:
    id: str
    series: tuple  # one tuple of Observation per variable slot
    label: int
    static_fields: dict = field(default_factory=dict)

    @property
    def num_variables(self) -> int:
        return len(self.series)

    def arrays(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Times and values of variable ``d`` as float64 arrays."""
        obs = self.series[d]
        if not obs:
            return np.empty(0), np.empty(0)
        arr = np.asarray(obs, dtype=np.float64)
        return arr[:, 0], arr[:, 1]

    def with_series(self, series) -> "Sample":
        return Sample(self.id, tuple(series), self.label, dict(self.static_fields))


@dataclass
class Dataset:
    samples: list
    variable_names: list
    num_classes: int
    static_schema: list | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_variables(self) -> int:
        return len(self.variable_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> list:
        return [self.samples[i] for i in indices]

    def validate(self) -> None:
        D, C = self.num_variables, self.num_classes
        if C < 1:
            raise DatasetError(f"num_classes must be >= 1, got {C}")
        for i, s in enumerate(self.samples):
            _validate_sample(s, D, C, locus=f"sample {i} ({s.id!r})")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def indices(self, name: str) -> tuple:
        if name not in ("train", "val", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)


def _validate_sample(s: Sample, D: int, C: int, locus: str) -> None:
    if len(s.series) != D:
        raise DatasetError(f"{locus}: expected {D} variable slots, got {len(s.series)}")
    if not (isinstance(s.label, (int, np.integer)) and 0 <= s.label < C):
        raise DatasetError(f"{locus}: label out of range: {s.label!r} not in 0..{C - 1}")
    for d, obs in enumerate(s.series):
        prev = -math.inf
        for t, v in obs:
            if not (math.isfinite(t) and math.isfinite(v)):
                raise DatasetError(f"{locus}: non-finite observation ({t!r}, {v!r}) in variable {d}")
            if t == prev:
                raise DatasetError(f"{locus}: duplicate timestamp {t!r} in variable {d}")
            if t < prev:
                raise DatasetError(f"{locus}: variable {d} not sorted by time")
            prev = t


def make_sample(id, series, label, static_fields=None) -> Sample:
    """Build a Sample, sorting each variable by time."""
    slots = []
    for obs in series:
        pairs = sorted((float(t), float(v)) for t, v in obs)
        slots.append(tuple(Observation(t, v) for t, v in pairs))
    return Sample(str(id), tuple(slots), int(label), dict(static_fields or {}))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        lines = fh.read().split("\n")
    records = [(n + 1, ln) for n, ln in enumerate(lines) if ln.strip()]
    if not records:
        raise DatasetError(f"{path}: empty file, missing header record")

    lineno, text = records[0]
    header = _parse_json(text, path, lineno)
    try:
        variables = [str(v) for v in header["variables"]]
        num_classes = int(header["num_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}:{lineno}: malformed header record ({exc})") from None
    schema = header.get("static_schema")
    D = len(variables)

    samples = []
    for lineno, text in records[1:]:
        rec = _parse_json(text, path, lineno)
        try:
            sid = rec["id"]
            label = rec["label"]
            raw_series = rec["series"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc}") from None
        if not isinstance(label, int) or isinstance(label, bool):
            raise DatasetError(f"{path}:{lineno}: label must be an integer, got {label!r}")
        try:
            series = [[(float(t), float(v)) for t, v in obs] for obs in raw_series]
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed series ({exc})") from None
        sample = make_sample(sid, series, label, rec.get("static") or {})
        _validate_sample(sample, D, num_classes, locus=f"{path}:{lineno}")
        samples.append(sample)

    return Dataset(samples, variables, num_classes, list(schema) if schema is not None else None)


def _parse_json(text: str, path, lineno: int):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: parse error: {exc.msg} at column {exc.colno}") from None


def write_dataset(dataset: Dataset, path, provenance: Mapping | None = None) -> None:
    """Write the canonical format; ``provenance`` is stored in the header and ignored on load."""
    header = {
        "variables": list(dataset.variable_names),
        "num_classes": dataset.num_classes,
        "static_schema": dataset.static_schema,
    }
    if provenance:
        header["provenance"] = dict(provenance)
    lines = [json.dumps(header)]
    for s in dataset.samples:
        rec = {
            "id": s.id,
            "label": int(s.label),
            "static": s.static_fields,
            "series": [[[t, v] for t, v in obs] for obs in s.series],
        }
        lines.append(json.dumps(rec))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def convert_wide_csv(
    csv_path,
    *,
    id_col: str = "id",
    time_col: str = "time",
    label_col: str = "label",
    static_cols: Sequence[str] = (),
    num_classes: int | None = None,
    aggregate: str = "error",
) -> Dataset:
    """Ingest a wide CSV (one row per timestamp, blank cell = missing).

    Columns other than id/time/label/static are treated as variables, in file
    order. ``aggregate='mean'`` averages duplicate timestamps within a
    variable instead of rejecting them.
    """
    if aggregate not in ("error", "mean"):
        raise DatasetError(f"unknown aggregate mode {aggregate!r}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{csv_path}: empty CSV")
        reserved = {id_col, time_col, label_col, *static_cols}
        missing = [c for c in (id_col, time_col, label_col) if c not in reader.fieldnames]
        if missing:
            raise DatasetError(f"{csv_path}: missing required column(s) {missing}")
        variables = [c for c in reader.fieldnames if c not in reserved]
        order: list[str] = []
        cells: dict = {}
        labels: dict = {}
        statics: dict = {}
        for lineno, row in enumerate(reader, start=2):
            sid = row[id_col]
            if sid not in cells:
                order.append(sid)
                cells[sid] = [defaultdict(list) for _ in variables]
                statics[sid] = {}
            try:
                t = float(row[time_col])
                label = int(row[label_col])
            except (TypeError, ValueError):
                raise DatasetError(f"{csv_path}:{lineno}: bad time or label") from None
            if labels.setdefault(sid, label) != label:
                raise DatasetError(f"{csv_path}:{lineno}: conflicting labels for id {sid!r}")
            for col in static_cols:
                raw = (row.get(col) or "").strip()
                if raw and col not in statics[sid]:
                    statics[sid][col] = _static_value(raw)
            for d, name in enumerate(variables):
                raw = (row.get(name) or "").strip()
                if not raw:
                    continue
                try:
                    cells[sid][d][t].append(float(raw))
                except ValueError:
                    raise DatasetError(f"{csv_path}:{lineno}: non-numeric value {raw!r} in {name}") from None

    samples = []
    for sid in order:
        series = []
        for d, per_time in enumerate(cells[sid]):
            obs = []
            for t, vals in per_time.items():
                if len(vals) > 1 and aggregate == "error":
                    raise DatasetError(
                        f"{csv_path}: duplicate timestamp {t!r} for id {sid!r} variable {variables[d]!r}"
                    )
                obs.append((t, sum(vals) / len(vals)))
            series.append(obs)
        samples.append(make_sample(sid, series, labels[sid], statics[sid]))
    C = num_classes if num_classes is not None else (max(labels.values()) + 1 if labels else 1)
    ds = Dataset(samples, variables, C, list(static_cols) or None)
    ds.validate()
    return ds


def _static_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def make_splits(dataset: Dataset, seed: int, ratios=(0.8, 0.1, 0.1)) -> SplitSpec:
    """Stratified, seeded train/val/test split.

    Each class is shuffled independently and divided by largest-remainder
    rounding, so per-class proportions are preserved within one sample.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    N = len(dataset)
    if N < 3:
        raise DatasetError(f"need at least 3 samples to split, got {N}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    parts: list[list[int]] = [[], [], []]
    requested = [r > 0 for r in ratios]
    for c in range(dataset.num_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        counts = _allocate(members.size, ratios)
        for k in range(3):
            if requested[k] and counts[k] == 0:
                donor = int(np.argmax(counts))
                if counts[donor] <= 1:
                    raise DatasetError(
                        f"class {c} has {members.size} sample(s); cannot populate every requested split"
                    )
                counts[donor] -= 1
                counts[k] += 1
        start = 0
        for k in range(3):
            parts[k].extend(int(i) for i in members[start : start + counts[k]])
            start += counts[k]
    return SplitSpec(*(tuple(sorted(p)) for p in parts), seed=int(seed))


def _allocate(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(math.floor(x)) for x in exact]
    rem = n - sum(counts)
    by_remainder = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in by_remainder[:rem]:
        counts[k] += 1
    return counts


def missing_ratios(dataset: Dataset, indices: Sequence[int]) -> np.ndarray:
    """Per-variable fraction of unobserved (variable, timestamp) opportunities.

    The opportunity count of a sample is its number of distinct timestamps
    across all variables.
    """
    indices = list(indices)
    if not indices:
        raise DatasetError("missing_ratios needs at least one sample index")
    D = dataset.num_variables
    observed = np.zeros(D)
    opportunities = 0
    for i in indices:
        s = dataset.samples[i]
        stamps = set()
        for d, obs in enumerate(s.series):
            observed[d] += len(obs)
            stamps.update(o.time for o in obs)
        opportunities += len(stamps)
    if opportunities == 0:
        return np.ones(D)
    return np.clip(1.0 - observed / opportunities, 0.0, 1.0)


def sort_variables(dataset: Dataset, indices: Sequence[int]) -> list[int]:
    """Variable permutation by ascending missing ratio; ties keep index order."""
    return order_by_ratio(missing_ratios(dataset, indices))


def order_by_ratio(ratios) -> list[int]:
    return [int(i) for i in np.argsort(np.asarray(ratios), kind="stable")]


def upsample_minority(train_indices: Sequence[int], labels, seed: int) -> list[int]:
    """Duplicate members of smaller classes until every class matches the majority.

    Originals are kept in their input order; duplicates are appended class by
    class, cycling through a seeded shuffle of that class's members.
    """
    train_indices = [int(i) for i in train_indices]
    by_class: dict = defaultdict(list)
    for i in train_indices:
        by_class[int(labels[i])].append(i)
    if len(by_class) < 2:
        raise DatasetError("upsampling needs at least two classes among the training indices")
    target = max(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    out = list(train_indices)
    for c in sorted(by_class):
        members = by_class[c]
        need = target - len(members)
        if need == 0:
            continue
        cycle = [members[j] for j in rng.permutation(len(members))]
        out.extend(cycle[k % len(cycle)] for k in range(need))
    return out


_PLACEHOLDER = re.compile(r"\{([^{}]*)\}")


def render_template(static_fields: Mapping, template: str) -> str:
    """Substitute ``{name}`` placeholders verbatim from ``static_fields``."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in static_fields:
            raise DatasetError(f"template placeholder {{{name}}} has no static field")
        return str(static_fields[name])

    return _PLACEHOLDER.sub(sub, template)
