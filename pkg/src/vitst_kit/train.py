"""Fine-tuning, masked-image pretraining and leave-sensors-out evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import SensorMaskSpec, cutout, drop_sensors, fixed_drop_set, mim_mask
from .dataset import Dataset, SplitSpec, render_template, sort_variables, upsample_minority
from .errors import ConfigError, ModelError, TrainingDiverged
from .metrics import MetricsReport, compute_metrics, selection_key
from .raster import AxisLimits, GridLayout, LimitStrategy, RenderConfig, fit_axis_limits, grid_layout, render_many
from .swin import ModelConfig, SwinClassifier, images_to_array

log = logging.getLogger("vitst_kit.train")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-5
    weight_decay: float = 0.05
    seed: int = 0
    cutout: bool = True
    cutout_regions: int = 16
    cutout_size: int = 16
    upsample: bool = True
    balance_batches: bool = False
    limit_strategy: str = "default"
    cell_px: tuple = (64, 64)
    image_size: tuple | None = None
    order: str = "sorted"
    marker: bool = True
    interpolate: bool = True
    oob: str = "clamp"
    static_template: str = ""
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be a finite non-negative number, got {self.lr}")
        if self.order not in ("sorted", "original"):
            raise ConfigError(f"order must be 'sorted' or 'original', got {self.order!r}")
        LimitStrategy(self.limit_strategy)


@dataclass(frozen=True)
class MimConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-5
    weight_decay: float = 0.05
    seed: int = 0
    mask_ratio: float = 0.5
    col_width: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr >= 0:
            raise ConfigError("mim epochs, batch_size must be >= 1 and lr >= 0")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1], got {self.mask_ratio}")


@dataclass
class ImagePipeline:
    """Everything needed to turn a sample into model input, fitted on the training split."""

    limits: AxisLimits
    layout: GridLayout
    order: list
    render: RenderConfig
    patch_size: int
    static_template: str = ""
    threads: int = 1

    @classmethod
    def fit(cls, dataset: Dataset, splits: SplitSpec, cfg: TrainConfig, patch_size: int) -> "ImagePipeline":
        limits = fit_axis_limits(dataset, splits.train, LimitStrategy(cfg.limit_strategy))
        D = dataset.num_variables
        order = sort_variables(dataset, splits.train) if cfg.order == "sorted" else list(range(D))
        render = RenderConfig(cell_px=tuple(cfg.cell_px), marker=cfg.marker, interpolate=cfg.interpolate,
                              oob=cfg.oob, image_size=tuple(cfg.image_size) if cfg.image_size else None)
        return cls(limits, grid_layout(D), order, render, patch_size, cfg.static_template, cfg.threads)

    @property
    def cell_size(self) -> tuple:
        return self.render.cell_size(self.layout)

    def images(self, samples: Sequence) -> list:
        return render_many(samples, self.limits, self.layout, self.order, self.render, self.threads)

    def arrays(self, images: Sequence) -> np.ndarray:
        return images_to_array(images, self.patch_size)

    def sentences(self, samples: Sequence) -> list:
        return [static_sentence(s.static_fields, self.static_template) for s in samples]

    def to_meta(self) -> dict:
        return {
            "pipeline.t_limits": json.dumps([self.limits.t_min, self.limits.t_max]),
            "pipeline.y_limits": json.dumps([list(p) for p in self.limits.y]),
            "pipeline.degenerate": json.dumps(list(self.limits.degenerate)),
            "pipeline.layout": json.dumps([self.layout.rows, self.layout.cols]),
            "pipeline.order": json.dumps(list(self.order)),
            "pipeline.cell_px": json.dumps(list(self.render.cell_px)),
            "pipeline.image_size": json.dumps(list(self.render.image_size) if self.render.image_size else None),
            "pipeline.marker": json.dumps(self.render.marker),
            "pipeline.interpolate": json.dumps(self.render.interpolate),
            "pipeline.oob": json.dumps(self.render.oob),
            "pipeline.patch_size": str(self.patch_size),
            "pipeline.static_template": json.dumps(self.static_template),
        }

    @classmethod
    def from_meta(cls, meta: dict, threads: int = 1) -> "ImagePipeline":
        try:
            t = json.loads(meta["pipeline.t_limits"])
            limits = AxisLimits(t[0], t[1], [tuple(p) for p in json.loads(meta["pipeline.y_limits"])],
                                json.loads(meta["pipeline.degenerate"]))
            rows, cols = json.loads(meta["pipeline.layout"])
            size = json.loads(meta["pipeline.image_size"])
            render = RenderConfig(cell_px=tuple(json.loads(meta["pipeline.cell_px"])),
                                  marker=json.loads(meta["pipeline.marker"]),
                                  interpolate=json.loads(meta["pipeline.interpolate"]),
                                  oob=json.loads(meta["pipeline.oob"]),
                                  image_size=tuple(size) if size else None)
            return cls(limits, GridLayout(rows, cols), json.loads(meta["pipeline.order"]), render,
                       int(meta["pipeline.patch_size"]), json.loads(meta["pipeline.static_template"]), threads)
        except KeyError as exc:
            raise ModelError(f"checkpoint lacks pipeline entry {exc.args[0]}") from None


def static_sentence(fields: dict, template: str = "") -> str:
    if template:
        return render_template(fields, template)
    return " ".join(f"{k} {v}" for k, v in fields.items())


def model_meta(cfg: ModelConfig) -> dict:
    return {f"model.{k}": json.dumps(v) for k, v in cfg.to_dict().items()}


def model_config_from_meta(meta: dict) -> ModelConfig:
    fields = {k[len("model."):]: json.loads(v) for k, v in meta.items() if k.startswith("model.")}
    if not fields:
        raise ModelError("checkpoint carries no model configuration")
    return ModelConfig.from_dict(fields)


def epoch_order(train_indices: Sequence[int], labels, cfg: TrainConfig, epoch: int) -> list:
    """Sample order for one epoch: optional upsampling or class-interleaved balancing, then shuffling."""
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    if cfg.balance_batches:
        by_class: dict = {}
        for i in train_indices:
            by_class.setdefault(int(labels[i]), []).append(int(i))
        target = max(len(v) for v in by_class.values())
        streams = []
        for c in sorted(by_class):
            m = [by_class[c][j] for j in rng.permutation(len(by_class[c]))]
            streams.append([m[k % len(m)] for k in range(target)])
        return [s[k] for k in range(target) for s in streams]
    idx = list(train_indices)
    if cfg.upsample and len(set(int(labels[i]) for i in idx)) > 1:
        idx = upsample_minority(idx, labels, seed=cfg.seed + epoch)
    return [idx[j] for j in rng.permutation(len(idx))]


def classifier_parameters(model: SwinClassifier) -> list:
    return [(n, p) for n, p in model.named_parameters() if not n.startswith(("mim_head.", "mask_token"))]


def mim_parameters(model: SwinClassifier) -> list:
    return [(n, p) for n, p in model.named_parameters() if not n.startswith(("head.", "static_table"))]


@dataclass
class TrainResult:
    model: SwinClassifier
    pipeline: ImagePipeline
    log: list = field(default_factory=list)  # dicts with epoch, loss, val_metric
    best_epoch: int = 0
    best_metric: float = float("nan")


def _forward(model: SwinClassifier, pipeline: ImagePipeline, images, samples) -> T.Tensor:
    static = pipeline.sentences(samples) if model.cfg.static_dim else None
    return model.forward_classify(pipeline.arrays(images), static)


def train_classifier(dataset: Dataset, splits: SplitSpec, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     init_state: dict | None = None, pipeline: ImagePipeline | None = None) -> TrainResult:
    """Cross-entropy fine-tuning with AdamW; returns the best-validation weights."""
    if model_cfg.num_classes != dataset.num_classes:
        raise ConfigError(f"model has {model_cfg.num_classes} classes, dataset {dataset.num_classes}")
    if not splits.train:
        raise ConfigError("training split is empty")
    pipeline = pipeline or ImagePipeline.fit(dataset, splits, train_cfg, model_cfg.patch_size)
    model = SwinClassifier(model_cfg, seed=train_cfg.seed)
    if init_state:
        loaded = model.load_state_dict(init_state, strict=False)
        log.info("warm start: loaded %d tensors", len(loaded))
    opt = _optimizer(classifier_parameters(model), train_cfg)
    labels = dataset.labels
    cache = dict(zip(splits.train, pipeline.images(dataset.subset(splits.train))))
    val_idx = list(splits.val)
    val_images = pipeline.images(dataset.subset(val_idx)) if val_idx else []

    result = TrainResult(model, pipeline)
    best_state, best_key = model.state_dict(), None
    for epoch in range(1, train_cfg.epochs + 1):
        rng = np.random.default_rng([train_cfg.seed, epoch, 2])
        order = epoch_order(splits.train, labels, train_cfg, epoch)
        losses = []
        for b in range(0, len(order), train_cfg.batch_size):
            batch = order[b:b + train_cfg.batch_size]
            imgs = [cache[i] for i in batch]
            if train_cfg.cutout:
                imgs = [cutout(im, rng, train_cfg.cutout_regions, train_cfg.cutout_size) for im in imgs]
            opt.zero_grad()
            loss = T.cross_entropy(_forward(model, pipeline, imgs, dataset.subset(batch)), labels[batch])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b // train_cfg.batch_size}")
            loss.backward()
            opt.step()
            losses.append(value)
        mean_loss = float(np.mean(losses))
        if val_idx:
            metrics, _ = evaluate_images(model, pipeline, val_images, dataset.subset(val_idx), dataset.num_classes)
            key = selection_key(metrics, dataset.num_classes)
        else:
            key = (-mean_loss,)
        score = key[0]
        result.log.append({"epoch": epoch, "loss": mean_loss, "val_metric": score})
        log.info("epoch %d loss %.5f val %.4f", epoch, mean_loss, score)
        if best_key is None or key > best_key:
            best_key = key
            result.best_epoch, result.best_metric = epoch, score
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return result


def _optimizer(named, cfg) -> T.AdamW:
    return T.AdamW(named, lr=cfg.lr, weight_decay=cfg.weight_decay)


def predict_logits(model: SwinClassifier, pipeline: ImagePipeline, images, samples, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for b in range(0, len(images), batch_size):
            out.append(_forward(model, pipeline, images[b:b + batch_size], samples[b:b + batch_size]).data)
    if not out:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(out).astype(np.float64)


def evaluate_images(model, pipeline, images, samples, num_classes: int) -> tuple:
    logits = predict_logits(model, pipeline, images, samples)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return compute_metrics(logits, labels, num_classes), logits


def evaluate(model: SwinClassifier, pipeline: ImagePipeline, dataset: Dataset, indices: Sequence[int]) -> dict:
    samples = dataset.subset(indices)
    if not samples:
        raise ConfigError("cannot evaluate an empty split")
    metrics, _ = evaluate_images(model, pipeline, pipeline.images(samples), samples, dataset.num_classes)
    return metrics


def leave_sensors_out_eval(model: SwinClassifier, pipeline: ImagePipeline, dataset: Dataset,
                           indices: Sequence[int], mode: str = "fixed",
                           ratios: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5), seed: int = 0) -> list:
    """Metrics per drop ratio with sensors emptied in the evaluated samples only.

    Returns a list of ``{"ratio", "metrics", "mask"}`` rows; ``mask`` records
    the sensor-mask provenance.
    """
    samples = dataset.subset(indices)
    D = dataset.num_variables
    rows = []
    for ratio in ratios:
        if mode == "fixed":
            spec = SensorMaskSpec("fixed", fixed_drop_set(D, ratio, seed), ratio, seed)
        else:
            spec = SensorMaskSpec("random", (), ratio, seed)
        dropped = [drop_sensors(s, spec) for s in samples]
        metrics, _ = evaluate_images(model, pipeline, pipeline.images(dropped), dropped, dataset.num_classes)
        rows.append({"ratio": float(ratio), "metrics": metrics, "mask": spec.to_dict()})
    return rows


def pretrain_mim(dataset: Dataset, splits: SplitSpec, model_cfg: ModelConfig, mim_cfg: MimConfig,
                 pipeline: ImagePipeline) -> TrainResult:
    """Masked image modeling on the training split's images (labels unused)."""
    model = SwinClassifier(model_cfg, seed=mim_cfg.seed)
    opt = _optimizer(mim_parameters(model), mim_cfg)
    train_idx = list(splits.train)
    images = pipeline.images(dataset.subset(train_idx))
    arrays = pipeline.arrays(images)
    cell = pipeline.cell_size
    if arrays.shape[1:3] != (pipeline.layout.rows * cell[0], pipeline.layout.cols * cell[1]):
        raise ModelError("masked pretraining needs images whose size is a multiple of the patch size")
    result = TrainResult(model, pipeline)
    for epoch in range(1, mim_cfg.epochs + 1):
        rng = np.random.default_rng([mim_cfg.seed, epoch, 3])
        perm = rng.permutation(len(train_idx))
        losses = []
        for b in range(0, len(perm), mim_cfg.batch_size):
            sel = perm[b:b + mim_cfg.batch_size]
            masks = [mim_mask(pipeline.layout, cell, model_cfg.patch_size, rng, mim_cfg.col_width,
                              mim_cfg.mask_ratio) for _ in sel]
            if sum(m.masked_count for m in masks) == 0:
                continue
            opt.zero_grad()
            loss, _ = model.forward_mim(arrays[sel], masks)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"mim loss became {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(value)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        result.log.append({"epoch": epoch, "loss": mean_loss, "val_metric": float("nan")})
        log.info("mim epoch %d loss %.5f", epoch, mean_loss)
    result.best_epoch = mim_cfg.epochs
    return result


def report_from(rows: Sequence[dict]) -> MetricsReport:
    rep = MetricsReport()
    for m in rows:
        rep.add(m)
    return rep
