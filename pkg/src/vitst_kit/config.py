"""Flat ``section.key=value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .swin import ModelConfig
from .train import MimConfig, TrainConfig


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw: str) -> tuple:
    return tuple(int(p) for p in raw.replace("x", ",").split(",") if p.strip())


def _opt_ints(raw: str):
    return None if raw.strip().lower() in ("", "none") else _ints(raw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# key -> (default, parser)
SCHEMA = {
    "split.train": (0.8, float),
    "split.val": (0.1, float),
    "split.test": (0.1, float),
    "split.seed": (0, int),
    "synth.n": (600, int),
    "synth.variables": (8, int),
    "synth.classes": (2, int),
    "synth.drop_ratio": (0.6, float),
    "synth.grid": (50, int),
    "synth.seed": (0, int),
    "convert.id_col": ("id", str),
    "convert.time_col": ("time", str),
    "convert.label_col": ("label", str),
    "convert.static_cols": ("", str),
    "convert.num_classes": (0, int),
    "convert.aggregate": ("error", str),
    "raster.cell_px": ((64, 64), _ints),
    "raster.image_size": (None, _opt_ints),
    "raster.limit_strategy": ("default", str),
    "raster.order": ("sorted", str),
    "raster.marker": (True, _bool),
    "raster.interpolate": (True, _bool),
    "raster.oob": ("clamp", str),
    "augment.cutout": (True, _bool),
    "augment.cutout_regions": (16, int),
    "augment.cutout_size": (16, int),
    "augment.upsample": (True, _bool),
    "augment.balance_batches": (False, _bool),
    "static.template": ("", str),
    "model.patch_size": (4, int),
    "model.window": (7, int),
    "model.depths": ((2, 2), _ints),
    "model.embed_dim": (32, int),
    "model.heads": ((2, 4), _ints),
    "model.mlp_ratio": (4, int),
    "model.static_dim": (0, int),
    "model.gelu": ("tanh", str),
    "train.epochs": (20, int),
    "train.batch_size": (32, int),
    "train.lr": (2e-5, float),
    "train.weight_decay": (0.05, float),
    "train.seed": (0, int),
    "mim.epochs": (10, int),
    "mim.batch_size": (32, int),
    "mim.lr": (2e-5, float),
    "mim.weight_decay": (0.05, float),
    "mim.mask_ratio": (0.5, float),
    "mim.col_width": (32, int),
    "mim.seed": (0, int),
}

SEED_KEYS = ("split.seed", "synth.seed", "train.seed", "mim.seed")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (d, _) in SCHEMA.items()})

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = SCHEMA[key][1](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    def set_assignment(self, text: str, locus: str = "--set") -> None:
        key, sep, raw = text.partition("=")
        if not sep:
            raise ConfigError(f"{locus}: expected section.key=value, got {text!r}")
        self.set(key, raw)

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        """File first, then ``--set`` overrides, then ``--seed`` for every seed key."""
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if line:
                    cfg.set_assignment(line, locus=f"{p}:{n}")
        for text in overrides:
            cfg.set_assignment(text)
        if seed is not None:
            for key in SEED_KEYS:
                cfg.values[key] = int(seed)
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def lines(self) -> list:
        return [f"{k}={_fmt(v)}" for k, v in sorted(self.values.items())]

    def text(self) -> str:
        return "\n".join(self.lines())

    def as_dict(self) -> dict:
        return {k: _fmt(v) for k, v in sorted(self.values.items())}

    def split_ratios(self) -> tuple:
        return (self["split.train"], self["split.val"], self["split.test"])

    def model_config(self, num_classes: int) -> ModelConfig:
        v = self.values
        return ModelConfig(patch_size=v["model.patch_size"], window=v["model.window"], depths=v["model.depths"],
                           embed_dim=v["model.embed_dim"], heads=v["model.heads"], mlp_ratio=v["model.mlp_ratio"],
                           num_classes=num_classes, static_dim=v["model.static_dim"], gelu=v["model.gelu"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"], lr=v["train.lr"],
            weight_decay=v["train.weight_decay"], seed=v["train.seed"], cutout=v["augment.cutout"],
            cutout_regions=v["augment.cutout_regions"], cutout_size=v["augment.cutout_size"],
            upsample=v["augment.upsample"], balance_batches=v["augment.balance_batches"],
            limit_strategy=v["raster.limit_strategy"], cell_px=v["raster.cell_px"],
            image_size=v["raster.image_size"], order=v["raster.order"], marker=v["raster.marker"],
            interpolate=v["raster.interpolate"], oob=v["raster.oob"], static_template=v["static.template"],
        )

    def mim_config(self) -> MimConfig:
        v = self.values
        return MimConfig(epochs=v["mim.epochs"], batch_size=v["mim.batch_size"], lr=v["mim.lr"],
                         weight_decay=v["mim.weight_decay"], seed=v["mim.seed"],
                         mask_ratio=v["mim.mask_ratio"], col_width=v["mim.col_width"])
