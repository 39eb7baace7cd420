"""Command-line entry point: ``vitst-kit <command> [options]``.

Every command accepts ``--config``, repeatable ``--set section.key=value``,
``--seed`` and ``--threads``. Failures print one line of the form
``error: kind=<kind> msg=<message>`` to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import Dataset, convert_wide_csv, load_dataset, make_splits, sort_variables, write_dataset
from .errors import CheckpointError, ConfigError, VitstError
from .image import ImageBuffer, write_image
from .raster import LimitStrategy, RenderConfig, fit_axis_limits, grid_layout, load_limits, render_many, save_limits
from .swin import SwinClassifier
from .synth import synth_generate
from .train import (ImagePipeline, leave_sensors_out_eval, evaluate, model_config_from_meta, model_meta,
                    pretrain_mim, train_classifier)

log = logging.getLogger("vitst_kit")

EXIT_ERROR = 1


def _header(cfg: RunConfig, command: str) -> str:
    return "\n".join([f"vitst-kit {command}", *cfg.lines()])


def _dataset(path) -> Dataset:
    return load_dataset(path)


def _splits(ds: Dataset, cfg: RunConfig):
    return make_splits(ds, cfg["split.seed"], cfg.split_ratios())


def _split_indices(ds: Dataset, cfg: RunConfig, name: str) -> tuple:
    if name == "all":
        return tuple(range(len(ds)))
    return _splits(ds, cfg).indices(name)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_model(path, model: SwinClassifier, pipeline: ImagePipeline, cfg: RunConfig, kind: str, extra=None) -> None:
    meta = {f"config.{k}": v for k, v in cfg.as_dict().items()}
    meta.update(model_meta(model.cfg))
    meta.update(pipeline.to_meta())
    meta["kind"] = kind
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def _load_model(path, ds: Dataset | None, threads: int):
    tensors, meta = load_checkpoint(path)
    mcfg = model_config_from_meta(meta)
    pipeline = ImagePipeline.from_meta(meta, threads)
    if ds is not None:
        if len(pipeline.limits.y) != ds.num_variables:
            raise CheckpointError(f"checkpoint expects {len(pipeline.limits.y)} variables, data has {ds.num_variables}")
        if mcfg.num_classes != ds.num_classes:
            raise CheckpointError(f"checkpoint has {mcfg.num_classes} classes, data has {ds.num_classes}")
    model = SwinClassifier(mcfg, seed=0)
    model.load_state_dict(tensors)
    return model, pipeline, meta


def cmd_synth(args, cfg: RunConfig) -> None:
    ds = synth_generate(cfg["synth.n"], cfg["synth.variables"], cfg["synth.classes"], cfg["synth.drop_ratio"],
                        cfg["synth.seed"], grid=cfg["synth.grid"])
    write_dataset(ds, args.out, provenance=cfg.as_dict())


def cmd_convert(args, cfg: RunConfig) -> None:
    statics = [c.strip() for c in cfg["convert.static_cols"].split(",") if c.strip()]
    ds = convert_wide_csv(args.csv, id_col=cfg["convert.id_col"], time_col=cfg["convert.time_col"],
                          label_col=cfg["convert.label_col"], static_cols=statics,
                          num_classes=cfg["convert.num_classes"] or None, aggregate=cfg["convert.aggregate"])
    write_dataset(ds, args.out, provenance=cfg.as_dict())


def cmd_fit_limits(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    idx = _split_indices(ds, cfg, args.split)
    strategy = LimitStrategy(args.strategy or cfg["raster.limit_strategy"])
    limits = fit_axis_limits(ds, idx, strategy)
    save_limits(limits, ds.variable_names, args.out, comment=_header(cfg, "fit-limits"))


def cmd_render(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    limits, names = load_limits(args.limits)
    if names != list(ds.variable_names):
        raise ConfigError("limits file variables do not match the dataset")
    train = _splits(ds, cfg).train
    order = sort_variables(ds, train) if cfg["raster.order"] == "sorted" else list(range(ds.num_variables))
    render = RenderConfig(cell_px=cfg["raster.cell_px"], marker=cfg["raster.marker"],
                          interpolate=cfg["raster.interpolate"], oob=cfg["raster.oob"],
                          image_size=cfg["raster.image_size"])
    idx = _split_indices(ds, cfg, args.split)
    samples = ds.subset(idx)
    images = render_many(samples, limits, grid_layout(ds.num_variables), order, render, args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comment = _header(cfg, "render")
    for s, img in zip(samples, images):
        write_image(img, out / f"{s.id}.ppm", comment=comment)


def _write_log(path, rows, cfg: RunConfig, command: str) -> None:
    buf = io.StringIO()
    for line in _header(cfg, command).splitlines():
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "val_metric"])
    for r in rows:
        w.writerow([r["epoch"], repr(r["loss"]), repr(r["val_metric"])])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def cmd_train(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    splits = _splits(ds, cfg)
    tcfg = cfg.train_config()
    mcfg = cfg.model_config(ds.num_classes)
    init, pipeline = None, None
    if args.init:
        tensors, meta = load_checkpoint(args.init)
        if model_config_from_meta(meta).to_dict() | {"num_classes": 0} != mcfg.to_dict() | {"num_classes": 0}:
            raise CheckpointError("warm-start checkpoint was built with a different model configuration")
        prefixes = SwinClassifier.ENCODER_PREFIXES
        init = {k: v for k, v in tensors.items() if k.startswith(prefixes)}
        pipeline = ImagePipeline.from_meta(meta, args.threads)
    else:
        pipeline = ImagePipeline.fit(ds, splits, tcfg, mcfg.patch_size)
    pipeline.threads = args.threads
    result = train_classifier(ds, splits, mcfg, tcfg, init_state=init, pipeline=pipeline)
    _save_model(args.out, result.model, result.pipeline, cfg, "classifier",
                {"best_epoch": str(result.best_epoch)})
    _write_log(args.log or f"{args.out}.log.csv", result.log, cfg, "train")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    splits = _splits(ds, cfg)
    mcfg = cfg.model_config(ds.num_classes)
    pipeline = ImagePipeline.fit(ds, splits, cfg.train_config(), mcfg.patch_size)
    pipeline.threads = args.threads
    result = pretrain_mim(ds, splits, mcfg, cfg.mim_config(), pipeline)
    _save_model(args.out, result.model, pipeline, cfg, "mim")
    _write_log(args.log or f"{args.out}.log.csv", result.log, cfg, "pretrain")


def cmd_eval(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    model, pipeline, meta = _load_model(args.checkpoint, ds, args.threads)
    metrics = evaluate(model, pipeline, ds, _split_indices(ds, cfg, args.split))
    _write_json(args.out, {
        "config": cfg.as_dict(),
        "checkpoint_config": {k[7:]: v for k, v in meta.items() if k.startswith("config.")},
        "split": args.split,
        "averaging": "macro",
        "metrics": metrics,
        "mean": metrics,
        "sd": {k: 0.0 for k in metrics},
        "sensor_mask": None,
    })


def _parse_ratios(text: str) -> list:
    try:
        return [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"bad ratio list {text!r}") from None


def cmd_mask_eval(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    model, pipeline, _ = _load_model(args.checkpoint, ds, args.threads)
    idx = _split_indices(ds, cfg, args.split)
    seed = args.mask_seed if args.mask_seed is not None else cfg["split.seed"]
    rows = leave_sensors_out_eval(model, pipeline, ds, idx, args.mode, _parse_ratios(args.ratios), seed)
    cols = ["auroc", "auprc"] if ds.num_classes == 2 else ["accuracy", "precision", "recall", "f1"]
    buf = io.StringIO()
    for line in _header(cfg, f"mask-eval mode={args.mode} mask_seed={seed} split={args.split}").splitlines():
        buf.write(f"# {line}\n")
    for r in rows:
        buf.write(f"# ratio={r['ratio']!r} mask={json.dumps(r['mask'], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ratio", *cols])
    for r in rows:
        w.writerow([repr(r["ratio"]), *(repr(r["metrics"][c]) for c in cols)])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")


def heat_to_image(heat: np.ndarray) -> ImageBuffer:
    """Map [0, 1] heat to a white-to-red ramp."""
    h = np.clip(heat, 0.0, 1.0)
    px = np.empty(h.shape + (3,), dtype=np.uint8)
    px[..., 0] = 255
    px[..., 1] = np.round(255 * (1.0 - h)).astype(np.uint8)
    px[..., 2] = np.round(255 * (1.0 - h)).astype(np.uint8)
    return ImageBuffer(px)


def cmd_attn(args, cfg: RunConfig) -> None:
    ds = _dataset(args.data)
    model, pipeline, _ = _load_model(args.checkpoint, ds, args.threads)
    matches = [s for s in ds.samples if s.id == args.sample_id]
    if not matches:
        raise ConfigError(f"no sample with id {args.sample_id!r}")
    image = pipeline.images(matches)[0]
    heat = model.attention_summary(pipeline.arrays([image]))[0][:image.height, :image.width]
    side = np.concatenate([image.pixels, heat_to_image(heat).pixels], axis=1)
    write_image(ImageBuffer(side), args.out, comment=_header(cfg, f"attn sample={args.sample_id}"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key=value file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="sets every seed key")
    common.add_argument("--threads", type=int, default=1, help="worker cap; 1 gives bit-reproducible training")

    parser = argparse.ArgumentParser(prog="vitst-kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", parents=[common], help="wide CSV to canonical dataset")
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("fit-limits", parents=[common], help="fit axis limits on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", choices=["train", "val", "test", "all"])
    p.add_argument("--strategy", choices=["default", "iqr", "sd", "mzs"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_limits)

    p = sub.add_parser("render", parents=[common], help="render samples to PPM images")
    p.add_argument("--data", required=True)
    p.add_argument("--limits", required=True)
    p.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    for name, func, helptext in (("train", cmd_train, "fine-tune a classifier"),
                                 ("pretrain", cmd_pretrain, "masked image pretraining")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="CSV training log (default <out>.log.csv)")
        if name == "train":
            p.add_argument("--init", help="pretrained checkpoint for encoder warm start")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="metrics JSON for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-eval", parents=[common], help="leave-sensors-out evaluation table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="fixed", choices=["fixed", "random"])
    p.add_argument("--ratios", "--ratio", default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--mask-seed", type=int)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_eval)

    p = sub.add_parser("attn", parents=[common], help="attention heat map beside the input image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)
    return parser


def configure_logging() -> None:
    level = os.environ.get("VITST_KIT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = RunConfig.load(args.config, args.set, args.seed)
        with threadpool_limits(limits=args.threads):
            args.func(args, cfg)
    except VitstError as exc:
        print(f"error: kind={exc.kind} msg={_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: kind=io msg={_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    return 0


def _one_line(exc: Exception) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
