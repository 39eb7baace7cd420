"""Acceptance criteria, one test per criterion.

Each test records PASS or FAIL with its runtime; the terminal summary in
conftest.py prints one line per criterion.
"""

import functools
import hashlib
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import oracles
from vitst_kit import tensor as T
from vitst_kit.cli import main as cli_main
from vitst_kit.dataset import Dataset, make_sample, make_splits
from vitst_kit.errors import ModelError
from vitst_kit.image import BACKGROUND
from vitst_kit.metrics import auprc, auroc
from vitst_kit.raster import (DEFAULT_PALETTE, STAR_OFFSETS, AxisLimits, LimitStrategy, RenderConfig,
                              fit_axis_limits, grid_layout, line_pixels, pixel_coords, render_many)
from vitst_kit.swin import ModelConfig, SwinBlock, SwinClassifier, WindowAttention, attention_mask
from vitst_kit.synth import synth_generate
from vitst_kit.tensor import Tensor, grad_check, precision
from vitst_kit.train import (ImagePipeline, MimConfig, TrainConfig, evaluate, leave_sensors_out_eval, pretrain_mim,
                             train_classifier)

RESULTS: dict = {}
WHITE = np.array(BACKGROUND, dtype=np.uint8)


def criterion(number: int, title: str, budget_s: float):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                out = fn(*args, **kwargs) or ""
            except BaseException as exc:
                RESULTS[number] = (title, False, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"[:160])
                raise
            # a test may return (detail, seconds spent in shared fixtures) so the budget covers them
            detail, extra = out if isinstance(out, tuple) else (out, 0.0)
            took = time.perf_counter() - t0 + extra
            ok = took < budget_s
            note = detail if ok else f"{detail} runtime {took:.1f}s over budget {budget_s:.0f}s".strip()
            RESULTS[number] = (title, ok, took, note)
            assert ok, note
        return run
    return wrap


# 1 ---------------------------------------------------------------------------

@criterion(1, "grid layout oracle", 1.0)
def test_criterion_01_grid_layout():
    for D, shape in ((34, (6, 6)), (36, (6, 6)), (17, (4, 5))):
        g = grid_layout(D)
        assert (g.rows, g.cols) == shape
    for D in range(1, 10_001):
        g = grid_layout(D)
        r, c = g.rows, g.cols
        assert r * c >= D and r * c - D < c and abs(r - c) <= 1, D
        assert (r, c) == oracles.grid_by_scan(D), D
    return "D=1..10000 exhaustive"


# 2 ---------------------------------------------------------------------------

def _fuzz_sample(rng, D, i):
    series = []
    for _ in range(D):
        n = int(rng.integers(0, 10))
        times = np.sort(rng.choice(1000, size=n, replace=False)) / 10.0
        scale = 10.0 ** rng.integers(-3, 250) if rng.random() < 0.2 else 1.0
        series.append(list(zip(times.tolist(), (rng.normal(size=n) * scale).tolist())))
    return make_sample(f"f{i}", series, 0)


def _ink(px):
    return ~np.all(px == WHITE, axis=-1)


@criterion(2, "rasterizer determinism and geometry", 30.0)
def test_criterion_02_raster():
    rng = np.random.default_rng(2024)
    D = 7
    g = grid_layout(D)
    lim = AxisLimits(5.0, 95.0, [(-2.0, 2.0)] * D)
    order = list(range(D))
    samples = [_fuzz_sample(rng, D, i) for i in range(1000)]
    cfg = RenderConfig(cell_px=(16, 16))
    first = render_many(samples, lim, g, order, cfg, threads=1)
    again = render_many(samples, lim, g, order, cfg, threads=1)
    threaded = render_many(samples, lim, g, order, cfg, threads=4)
    assert all(a.tobytes() == b.tobytes() == c.tobytes() for a, b, c in zip(first, again, threaded))

    no_line = render_many(samples, lim, g, order, RenderConfig(cell_px=(16, 16), interpolate=False))
    no_mark = render_many(samples, lim, g, order, RenderConfig(cell_px=(16, 16), marker=False))
    mono = render_many(samples, lim, g, order, RenderConfig(cell_px=(16, 16), palette=((0, 0, 0),)))
    h, w = cfg.cell_px
    for s, full, nl, nm, mc in zip(samples, first, no_line, no_mark, mono):
        ink_full = _ink(full.pixels)
        assert np.array_equal(_ink(mc.pixels), ink_full)
        assert (mc.pixels[ink_full] == 0).all()
        for d in range(g.rows * g.cols):
            r, c = divmod(d, g.cols)
            sl = (slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w))
            block = full.pixels[sl]
            cell_ink = _ink(block)
            if d >= D:
                assert not cell_ink.any()
                continue
            # every inked pixel in a cell carries that cell's own colour: nothing escaped from a neighbour
            assert (block[cell_ink] == DEFAULT_PALETTE[d]).all()
            times, values = s.arrays(d)
            px, py = pixel_coords(times, values, lim.y[d], (lim.t_min, lim.t_max), h, w)
            line = np.zeros((h, w), dtype=bool)
            if px.size > 1:
                lx, ly = line_pixels(px[:-1], py[:-1], px[1:], py[1:])
                line[ly, lx] = True
            nl_ink, nm_ink = _ink(nl.pixels[sl]), _ink(nm.pixels[sl])
            # without interpolation: a subset of the full render, missing only line pixels
            assert not (nl_ink & ~cell_ink).any()
            assert not (cell_ink & ~nl_ink & ~line).any()
            # without markers: differences stay within 2 px of an observation anchor
            near = np.zeros((h, w), dtype=bool)
            for ox, oy in zip(px, py):
                near[max(oy - 2, 0):oy + 3, max(ox - 2, 0):ox + 3] = True
            assert not ((nm_ink != cell_ink) & ~near).any()
    return "1000 samples x 7 variables"


# 3 ---------------------------------------------------------------------------

def _close(a, b):
    return abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


@criterion(3, "limit-strategy oracles", 5.0)
def test_criterion_03_limits():
    rng = np.random.default_rng(3)
    oracle = {"iqr": oracles.iqr_limits, "sd": oracles.sd_limits, "mzs": oracles.mzs_limits}
    for k in range(100):
        D = int(rng.integers(1, 4))
        samples = []
        for i in range(int(rng.integers(2, 12))):
            series = []
            for _ in range(D):
                n = int(rng.integers(1, 15))
                vals = rng.standard_t(2, size=n) * 10 ** rng.uniform(-2, 3) + rng.normal(0, 5)
                if k % 7 == 0:
                    vals = np.round(vals)  # ties
                series.append(list(zip(np.arange(n, dtype=float).tolist(), vals.tolist())))
            samples.append(make_sample(str(i), series, 0))
        ds = Dataset(samples, [f"v{d}" for d in range(D)], 2)
        train = list(range(0, len(samples), 2)) or [0]
        default = fit_axis_limits(ds, train, LimitStrategy("default"))
        for tag, fn in oracle.items():
            got = fit_axis_limits(ds, train, LimitStrategy(tag))
            assert (got.t_min, got.t_max) == (default.t_min, default.t_max)
            for d in range(D):
                values = [v for i in train for _, v in ds.samples[i].series[d]]
                if min(values) == max(values):
                    continue
                want = oracles.clipped(fn(values), values)
                assert _close(got.y[d][0], want[0]) and _close(got.y[d][1], want[1]), (tag, values)
                lo, hi = default.y[d]
                assert lo <= got.y[d][0] <= got.y[d][1] <= hi
    return "100 datasets, IQR/SD/MZS"


# 4 ---------------------------------------------------------------------------

def _dense_reference(attn, x, window, heads, mask=None):
    bias = oracles.relative_bias(attn.rel_bias.data.astype(np.float64), window)
    outs, weights = [], []
    for i, win in enumerate(x):
        m = None if mask is None else mask[i % mask.shape[0]]
        o, wts = oracles.dense_attention(win.astype(np.float64), attn.qkv.weight.data, attn.qkv.bias.data,
                                         attn.proj.weight.data, attn.proj.bias.data, heads, bias, m)
        outs.append(o)
        weights.append(wts)
    return np.stack(outs), weights


@criterion(4, "window attention equivalence", 10.0)
def test_criterion_04_attention():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        heads = int(rng.choice([1, 2, 4]))
        dim = heads * int(rng.choice([2, 4, 8]))
        window = int(rng.integers(2, 8))
        attn = WindowAttention(dim, heads, window, rng)
        attn.qkv.weight.data = rng.normal(0, 0.5, size=attn.qkv.weight.shape).astype(np.float32)
        attn.qkv.bias.data = rng.normal(0, 0.1, size=attn.qkv.bias.shape).astype(np.float32)
        attn.rel_bias.data = rng.normal(size=attn.rel_bias.shape).astype(np.float32)
        x = rng.normal(size=(int(rng.integers(1, 4)), window * window, dim)).astype(np.float32)
        got = attn(Tensor(x)).data
        want, _ = _dense_reference(attn, x, window, heads)
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-5
    for window, H, W in ((2, 4, 6), (4, 8, 8), (7, 14, 21), (3, 7, 5)):
        blk = SwinBlock(8, 2, window, True, 2, rng)
        blk.attn.qkv.weight.data = rng.normal(0, 1.0, size=(8, 24)).astype(np.float32)
        blk.attention(Tensor(rng.normal(size=(1, H, W, 8))), record=True)
        mask, valid = attention_mask(H, W, window, window // 2)
        # padded queries are cropped after attention; only real queries must respect the mask
        forbidden = (mask < 0) & valid[:, :, None]
        forbidden = np.broadcast_to(forbidden[:, None], blk.attn.last_attn.shape)
        assert forbidden.any() and (blk.attn.last_attn[forbidden] == 0.0).all()
    return f"max |delta| {worst:.2e}"


# 5 ---------------------------------------------------------------------------

def _proj_loss(out, seed):
    return T.sum_(T.mul(out, Tensor(np.random.default_rng(seed).normal(size=out.shape))))


@criterion(5, "gradient checks (64-bit)", 120.0)
def test_criterion_05_gradients():
    worst = 0.0
    with precision(np.float64):
        rng = np.random.default_rng(5)
        a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
        w, bias = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5,)))
        g, beta = Tensor(rng.normal(size=(4,))), Tensor(rng.normal(size=(4,)))
        table, idx = Tensor(rng.normal(size=(6, 4))), np.array([[0, 3], [5, 3]])
        cases = [
            (lambda x, y: _proj_loss(T.add(x, y), 1), [a, b]),
            (lambda x, y: _proj_loss(T.sub(x, y), 2), [a, b]),
            (lambda x, y: _proj_loss(T.mul(x, y), 3), [a, b]),
            (lambda x: _proj_loss(T.scale(x, 0.3), 4), [a]),
            (lambda x: _proj_loss(T.abs_(x), 5), [a]),
            (lambda x, y: _proj_loss(T.matmul(x, y), 6), [a, w]),
            (lambda x, y, z: _proj_loss(T.linear(x, y, z), 7), [a, w, bias]),
            (lambda x: _proj_loss(T.transpose(x), 8), [a]),
            (lambda x: _proj_loss(T.reshape(x, (2, 6)), 9), [a]),
            (lambda x, y: _proj_loss(T.concat([x, y], axis=1), 10), [a, b]),
            (lambda x: _proj_loss(x[1:, ::2], 11), [a]),
            (lambda x: _proj_loss(T.roll(x, (1, -1), (0, 1)), 12), [a]),
            (lambda x: _proj_loss(T.pad(x, ((1, 0), (0, 2))), 13), [a]),
            (lambda x: _proj_loss(T.sum_(x, axis=0), 14), [a]),
            (lambda x: _proj_loss(T.mean(x, axis=1), 15), [a]),
            (lambda x: _proj_loss(T.softmax(x), 16), [a]),
            (lambda x, y, z: _proj_loss(T.layer_norm(x, y, z), 17), [a, g, beta]),
            (lambda x: _proj_loss(T.gelu(x, "tanh"), 18), [a]),
            (lambda x: _proj_loss(T.gelu(x, "none"), 19), [a]),
            (lambda x: _proj_loss(T.embedding_lookup(x, idx), 20), [table]),
            (lambda x: T.cross_entropy(x, [0, 3, 2]), [a]),
        ]
        for fn, args in cases:
            worst = max(worst, grad_check(fn, args, eps=1e-5))

        cfg = ModelConfig(patch_size=4, window=2, depths=(2,), embed_dim=8, heads=(2,), num_classes=2)
        model = SwinClassifier(cfg, seed=5)
        for p in model.parameters():
            p.data = p.data.astype(np.float64) + rng.normal(0, 0.1, size=p.shape)
        images = rng.uniform(-1, 1, size=(2, 8, 8, 3))
        params = [p for n, p in model.named_parameters() if not n.startswith(("mim_head.", "mask_token"))]
        model_err = grad_check(lambda *_: T.cross_entropy(model.forward_classify(images), [0, 1]), params, eps=1e-5)
    worst = max(worst, model_err)
    assert worst < 1e-4, worst
    return f"max rel err {worst:.2e} ({sum(p.size for p in params)} model params)"


# 6 ---------------------------------------------------------------------------

@criterion(6, "metric oracles", 5.0)
def test_criterion_06_metrics():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    rng = np.random.default_rng(6)
    for k in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[-1] = 0, 1
        if k % 10 == 0:
            scores = np.full(n, 0.5)
        elif k % 10 == 1:
            labels = np.zeros(n, dtype=int)
            labels[int(rng.integers(n))] = 1
            scores = rng.random(n)
        else:
            scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(auroc(scores, labels) - oracles.auroc_pairs(scores, labels)) < 1e-9
        assert abs(auprc(scores, labels) - oracles.auprc_thresholds(scores, labels)) < 1e-9
        if k % 10 == 0:
            assert auroc(scores, labels) == 0.5
    last = np.zeros(50, dtype=int)
    last[-1] = 1
    assert abs(auprc(np.arange(50, 0, -1), last) - 1 / 50) < 1e-12
    return "100 random sets"


# 7 ---------------------------------------------------------------------------

@criterion(7, "masked image modelling contract", 10.0)
def test_criterion_07_mim():
    rng = np.random.default_rng(7)
    cfg = ModelConfig(patch_size=4, window=2, depths=(1, 1), embed_dim=8, heads=(2, 2))
    model = SwinClassifier(cfg, seed=7)
    images = rng.uniform(-1, 1, size=(2, 16, 16, 3)).astype(np.float32)
    grids = rng.random((2, 4, 4)) < 0.4
    grids[:, 0, 0] = True
    loss, recon = model.forward_mim(images, grids)
    pix = np.repeat(np.repeat(grids, 4, axis=1), 4, axis=2)
    assert abs(loss.item() - oracles.l1_masked(recon.data, images, pix)) < 1e-6
    # the reconstruction is fixed while targets move: only masked targets can change the loss
    recon_fixed = recon.data.astype(np.float64)
    base = oracles.l1_masked(recon_fixed, images, pix)
    moved = images.copy()
    moved[~pix] += rng.normal(size=moved[~pix].shape).astype(np.float32)
    model.mim_head.weight.data[:] = 0  # decoder output independent of the input
    const_base = model.forward_mim(images, grids)[0].item()
    assert model.forward_mim(moved, grids)[0].item() == const_base
    assert oracles.l1_masked(recon_fixed, moved, pix) == base
    with pytest.raises(ModelError, match="empty mask"):
        model.forward_mim(images, np.zeros((2, 4, 4), dtype=bool))
    return "support, oracle and empty-mask guard"


# 8 and 9 ----------------------------------------------------------------------

DESK_DATA = dict(n=600, D=8, classes=2, drop_ratio=0.6, seed=0)
DESK_TRAIN = dict(epochs=20, batch_size=32, lr=5e-4, cell_px=(32, 32), cutout_regions=4, cutout_size=8, seed=0)


@pytest.fixture(scope="module")
def desk():
    ds = synth_generate(**DESK_DATA)
    return ds, make_splits(ds, seed=0)


@pytest.fixture(scope="module")
def scratch_run(desk):
    ds, sp = desk
    t0 = time.perf_counter()
    with threadpool_limits(1):
        res = train_classifier(ds, sp, ModelConfig(num_classes=2), TrainConfig(**DESK_TRAIN))
    return res, time.perf_counter() - t0


@criterion(8, "end-to-end desk run", 600.0)
def test_criterion_08_desk_run(desk, scratch_run):
    ds, sp = desk
    res, train_s = scratch_run
    with threadpool_limits(1):
        acc = evaluate(res.model, res.pipeline, ds, sp.test)["accuracy"]
        assert acc >= 0.90, acc
        at0, at5 = [], []
        for seed in range(3):
            rows = leave_sensors_out_eval(res.model, res.pipeline, ds, sp.test, "random", (0.0, 0.5), seed=seed)
            at0.append(rows[0]["metrics"]["accuracy"])
            at5.append(rows[1]["metrics"]["accuracy"])
        heat = res.model.attention_summary(res.pipeline.arrays(res.pipeline.images(ds.subset(sp.test[:16]))))
    assert np.mean(at5) <= np.mean(at0), (at0, at5)
    inked = [_ink(im.pixels) for im in res.pipeline.images(ds.subset(sp.test[:16]))]
    ink_mean = np.mean([h[m].mean() for h, m in zip(heat, inked)])
    bg_mean = np.mean([h[~m].mean() for h, m in zip(heat, inked)])
    return (f"test acc {acc:.3f}; drop 0.5 acc {np.mean(at5):.3f} vs {np.mean(at0):.3f}; "
            f"heat ink/background {ink_mean:.3f}/{bg_mean:.3f}", train_s)


@criterion(9, "MIM warm-start smoke test", 900.0)
def test_criterion_09_mim_warm_start(desk, scratch_run):
    ds, sp = desk
    scratch, scratch_s = scratch_run
    mcfg = ModelConfig(num_classes=2)
    tcfg = TrainConfig(**DESK_TRAIN)
    with threadpool_limits(1):
        pipe = ImagePipeline.fit(ds, sp, tcfg, mcfg.patch_size)
        mim = pretrain_mim(ds, sp, mcfg, MimConfig(epochs=5, lr=1e-4, seed=0), pipe)
        assert all(math.isfinite(r["loss"]) for r in mim.log)
        warm = train_classifier(ds, sp, mcfg, tcfg, init_state=mim.model.encoder_state(), pipeline=pipe)
        acc_warm = evaluate(warm.model, warm.pipeline, ds, sp.test)["accuracy"]
        acc_scratch = evaluate(scratch.model, scratch.pipeline, ds, sp.test)["accuracy"]
    assert abs(acc_warm - acc_scratch) <= 0.05, (acc_warm, acc_scratch)
    losses = [r["loss"] for r in mim.log]
    return f"warm {acc_warm:.3f} vs scratch {acc_scratch:.3f}; mim loss {losses[0]:.3f} -> {losses[-1]:.3f}", scratch_s


# 10 --------------------------------------------------------------------------

CHAIN_CFG = """\
synth.n=60
synth.variables=5
raster.cell_px=16x16
augment.cutout_regions=2
augment.cutout_size=4
model.window=2
model.depths=1,1
model.heads=2,2
model.embed_dim=8
train.epochs=2
train.batch_size=16
train.lr=1e-3
mim.epochs=1
mim.batch_size=16
mim.col_width=8
"""


def _chain(root, cfg_path):
    c = ["--config", str(cfg_path), "--seed", "11", "--threads", "1"]
    steps = [
        ["synth", *c, "--out", f"{root}/data.jsonl"],
        ["fit-limits", *c, "--data", f"{root}/data.jsonl", "--out", f"{root}/limits.txt"],
        ["render", *c, "--data", f"{root}/data.jsonl", "--limits", f"{root}/limits.txt", "--out-dir", f"{root}/img"],
        ["pretrain", *c, "--data", f"{root}/data.jsonl", "--out", f"{root}/mim.ckpt"],
        ["train", *c, "--data", f"{root}/data.jsonl", "--init", f"{root}/mim.ckpt", "--out", f"{root}/model.ckpt"],
        ["eval", *c, "--checkpoint", f"{root}/model.ckpt", "--data", f"{root}/data.jsonl", "--out", f"{root}/m.json"],
        ["mask-eval", *c, "--checkpoint", f"{root}/model.ckpt", "--data", f"{root}/data.jsonl",
         "--out", f"{root}/mask.csv"],
        ["attn", *c, "--checkpoint", f"{root}/model.ckpt", "--data", f"{root}/data.jsonl", "--sample-id", "s00003",
         "--out", f"{root}/attn.ppm"],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(10, "CLI pipeline reproducibility", 600.0)
def test_criterion_10_cli_reproducible(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CHAIN_CFG)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = _chain(tmp_path / "a", cfg)
    b = _chain(tmp_path / "b", cfg)
    assert {"mim.ckpt", "model.ckpt", "m.json", "mask.csv", "attn.ppm", "img/s00000.ppm"} <= set(a)
    assert a == b
    return f"{len(a)} artifacts byte-identical"
