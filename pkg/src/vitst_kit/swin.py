"""Desk-scale shifted-window vision transformer.

Feature maps are (B, H, W, C) tensors. Each stage is a stack of blocks that
alternate plain and cyclically shifted window attention:

    y = x + (S)W-MSA(LN(x))
    z = y + MLP(LN(y))

Maps whose sides are not multiples of the window are zero-padded inside the
attention layer; padded keys are masked out and padded outputs cropped.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import MimMask
from .errors import ModelError
from .image import ImageBuffer
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    window: int = 7
    depths: tuple = (2, 2)
    embed_dim: int = 32
    heads: tuple = (2, 4)
    mlp_ratio: int = 4
    num_classes: int = 2
    static_dim: int = 0
    drop_path: float = 0.0
    gelu: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ModelError("depths and heads must be non-empty and of equal length")
        if any(d < 1 for d in self.depths):
            raise ModelError(f"every stage needs at least one block, got depths {self.depths}")
        if self.window < 2:
            raise ModelError(f"window must be >= 2, got {self.window}")
        for i, h in enumerate(self.heads):
            if self.stage_dim(i) % h:
                raise ModelError(f"stage {i} dim {self.stage_dim(i)} not divisible by {h} heads")
        if self.num_classes < 1 or self.static_dim < 0 or self.patch_size < 1:
            raise ModelError("invalid num_classes, static_dim or patch_size")
        if self.drop_path != 0.0:
            raise ModelError("stochastic depth is not supported; drop_path must be 0")

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2 ** i

    @property
    def final_dim(self) -> int:
        return self.stage_dim(len(self.depths) - 1)

    @property
    def stride(self) -> int:
        """Pixels per final-stage token side."""
        return self.patch_size * 2 ** (len(self.depths) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"], d["heads"] = list(self.depths), list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FeatureMap:
    tokens: Tensor  # (B, H, W, C)

    @property
    def grid(self) -> tuple:
        return self.tokens.shape[1], self.tokens.shape[2]


def images_to_array(images: Sequence[ImageBuffer], patch_size: int) -> np.ndarray:
    """Stack images as (B, H, W, 3) floats scaled to [-1, 1], padding with white to patch multiples."""
    arrs = []
    for img in images:
        px = img.to_float()
        H, W = px.shape[:2]
        ph, pw = (-H) % patch_size, (-W) % patch_size
        if ph or pw:
            px = np.pad(px, ((0, ph), (0, pw), (0, 0)), constant_values=1.0)
        arrs.append(px)
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ModelError(f"images in a batch must share one size, got {sorted(shapes)}")
    return (np.stack(arrs) * 2.0 - 1.0).astype(T.default_dtype())


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * nW, window*window, C); H and W must be window multiples."""
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ModelError(f"feature map {H}x{W} not divisible by window {window}; pad first")
    x = T.reshape(x, (B, H // window, window, W // window, window, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // window) * (W // window), window * window, C))


def window_reverse(windows: Tensor, window: int, H: int, W: int) -> Tensor:
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // window) * (W // window))
    x = T.reshape(windows, (B, H // window, W // window, window, window, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H, W, C))


def _partition_np(a: np.ndarray, window: int) -> np.ndarray:
    """(Hp, Wp) -> (nW, window*window) for index/validity maps."""
    Hp, Wp = a.shape
    a = a.reshape(Hp // window, window, Wp // window, window).transpose(0, 2, 1, 3)
    return a.reshape(-1, window * window)


def shift_regions(Hp: int, Wp: int, window: int, shift: int) -> np.ndarray:
    """Region labels on the shifted grid; tokens may only attend within their region."""
    region = np.zeros((Hp, Wp), dtype=np.int64)
    if shift == 0:
        return region
    bounds = lambda n: ((0, n - window), (n - window, n - shift), (n - shift, n))
    label = 0
    for h0, h1 in bounds(Hp):
        for w0, w1 in bounds(Wp):
            region[h0:h1, w0:w1] = label
            label += 1
    return region


def attention_mask(H: int, W: int, window: int, shift: int):
    """Additive (nW, N, N) mask plus the (nW, N) query validity map, or None if nothing is masked."""
    Hp, Wp = -(-H // window) * window, -(-W // window) * window
    if shift == 0 and Hp == H and Wp == W:
        return None, None
    valid = np.zeros((Hp, Wp), dtype=bool)
    valid[:H, :W] = True
    if shift:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    region = _partition_np(shift_regions(Hp, Wp, window, shift), window)
    valid_w = _partition_np(valid, window)
    allowed = (region[:, :, None] == region[:, None, :]) & valid_w[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE), valid_w


def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias = parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self._heads = heads
        self._dim = dim
        self._index = relative_position_index(window)
        self.last_attn = None

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, record: bool = False) -> Tensor:
        Bw, N, C = x.shape
        h = self._heads
        hd = C // h
        qkv = T.reshape(self.qkv(x), (Bw, N, 3, h, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = T.matmul(T.scale(q, hd ** -0.5), T.transpose(k))
        bias = T.transpose(T.embedding_lookup(self.rel_bias, self._index), (2, 0, 1))
        logits = T.add(logits, bias)
        if mask is not None:
            nW = mask.shape[0]
            full = np.ascontiguousarray(np.broadcast_to(mask[:, None], (nW, h, N, N)), dtype=logits.dtype)
            logits = T.reshape(T.add(T.reshape(logits, (Bw // nW, nW, h, N, N)), full), (Bw, h, N, N))
        attn = T.softmax(logits)
        self.last_attn = attn.data if record else None
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (Bw, N, C))
        return self.proj(out)


class SwinBlock(Module):
    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: int,
                 rng: np.random.Generator, gelu: str = "tanh"):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)
        self._window = window
        self._shift = window // 2 if shifted else 0
        self._gelu = gelu
        self._mask_cache: dict = {}
        self.received = None

    @property
    def shifted(self) -> bool:
        return self._shift > 0

    def _mask(self, H: int, W: int):
        if (H, W) not in self._mask_cache:
            self._mask_cache[(H, W)] = attention_mask(H, W, self._window, self._shift)
        return self._mask_cache[(H, W)]

    def attention(self, x: Tensor, record: bool = False) -> Tensor:
        """(S)W-MSA on an already-normalized map."""
        B, H, W, C = x.shape
        w, s = self._window, self._shift
        Hp, Wp = -(-H // w) * w, -(-W // w) * w
        y = T.pad(x, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
        if s:
            y = T.roll(y, (-s, -s), (1, 2))
        mask, valid = self._mask(H, W)
        out = self.attn(window_partition(y, w), mask, record=record)
        if record:
            self.received = self._received(self.attn.last_attn, valid, B, H, W, Hp, Wp)
        y = window_reverse(out, w, Hp, Wp)
        if s:
            y = T.roll(y, (s, s), (1, 2))
        if Hp != H or Wp != W:
            y = y[:, :H, :W, :]
        return y

    def _received(self, attn: np.ndarray, valid, B, H, W, Hp, Wp) -> np.ndarray:
        """Attention received per token, summed over real queries, averaged over heads."""
        a = attn.mean(axis=1)  # (B*nW, N, N)
        if valid is not None:
            nW = valid.shape[0]
            a = a.reshape(B, nW, *a.shape[1:]) * valid[None, :, :, None]
            a = a.reshape(-1, *a.shape[2:])
        got = a.sum(axis=1)  # per key
        w, s = self._window, self._shift
        grid = got.reshape(B, Hp // w, Wp // w, w, w).transpose(0, 1, 3, 2, 4).reshape(B, Hp, Wp)
        if s:
            grid = np.roll(grid, (s, s), axis=(1, 2))
        return grid[:, :H, :W]

    def __call__(self, x: Tensor, record: bool = False) -> Tensor:
        x = T.add(x, self.attention(self.norm1(x), record=record))
        hidden = T.gelu(self.fc1(self.norm2(x)), approximate=self._gelu)
        return T.add(x, self.fc2(hidden))


class PatchMerging(Module):
    """2x2 neighborhood concat (4C) -> LayerNorm -> linear to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        x = T.pad(x, ((0, 0), (0, H % 2), (0, W % 2), (0, 0)))
        H2, W2 = x.shape[1] // 2, x.shape[2] // 2
        x = T.reshape(x, (B, H2, 2, W2, 2, C))
        x = T.transpose(x, (0, 1, 3, 4, 2, 5))
        x = T.reshape(x, (B, H2, W2, 4 * C))
        return self.reduction(self.norm(x))


class PatchEmbed(Module):
    def __init__(self, patch: int, dim: int, rng: np.random.Generator):
        self.proj = Linear(patch * patch * 3, dim, rng)
        self.norm = LayerNorm(dim)
        self._patch = patch

    def patchify(self, images: np.ndarray) -> np.ndarray:
        B, H, W, _ = images.shape
        p = self._patch
        if H % p or W % p:
            raise ModelError(f"image {H}x{W} not divisible by patch size {p}")
        x = images.reshape(B, H // p, p, W // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(B, H // p, W // p, p * p * 3))

    def embed(self, images: np.ndarray) -> Tensor:
        """Pre-norm patch tokens."""
        return self.proj(Tensor(self.patchify(images)))


class Stage(Module):
    def __init__(self, dim: int, depth: int, heads: int, cfg: ModelConfig, rng, downsample: bool):
        self.blocks = [SwinBlock(dim, heads, cfg.window, i % 2 == 1, cfg.mlp_ratio, rng, cfg.gelu)
                       for i in range(depth)]
        self.downsample = PatchMerging(dim, rng) if downsample else None

    def __call__(self, x: Tensor, record: bool = False) -> Tensor:
        for blk in self.blocks:
            x = blk(x, record=record)
        if self.downsample is not None:
            x = self.downsample(x)
        return x


_TOKEN = re.compile(r"\w+")


def tokenize(sentence: str) -> list:
    return _TOKEN.findall(sentence.lower())


def token_buckets(sentence: str, n_buckets: int) -> list:
    return [zlib.crc32(tok.encode("utf-8")) % n_buckets for tok in tokenize(sentence)]


class SwinClassifier(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng)
        self.mask_token = parameter(trunc_normal(rng, (cfg.embed_dim,)))
        n = len(cfg.depths)
        self.stages = [Stage(cfg.stage_dim(i), cfg.depths[i], cfg.heads[i], cfg, rng, i < n - 1)
                       for i in range(n)]
        self.norm = LayerNorm(cfg.final_dim)
        self.static_table = parameter(trunc_normal(rng, (cfg.static_dim, cfg.static_dim))) if cfg.static_dim else None
        self.head = Linear(cfg.final_dim + cfg.static_dim, cfg.num_classes, rng)
        self.mim_head = Linear(cfg.final_dim, cfg.stride * cfg.stride * 3, rng)

    ENCODER_PREFIXES = ("patch_embed.", "stages.", "norm.")

    def encoder_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if k.startswith(self.ENCODER_PREFIXES)}

    def patch_embed_tokens(self, images: np.ndarray, mask_grid: np.ndarray | None = None) -> Tensor:
        tokens = self.patch_embed.embed(images)
        if mask_grid is not None:
            B, h, w, C = tokens.shape
            if mask_grid.shape != (B, h, w):
                raise ModelError(f"mask grid {mask_grid.shape} does not match patch grid {(B, h, w)}")
            m = np.broadcast_to(mask_grid[..., None], tokens.shape).astype(tokens.dtype)
            tokens = T.add(T.mul(tokens, 1.0 - m), T.mul(Tensor(m), self.mask_token))
        return self.patch_embed.norm(tokens)

    def forward_features(self, images: np.ndarray, mask_grid: np.ndarray | None = None,
                         record: bool = False) -> Tensor:
        x = self.patch_embed_tokens(images, mask_grid)
        for i, stage in enumerate(self.stages):
            x = stage(x, record=record and i == len(self.stages) - 1)
        return self.norm(x)

    def encode_static(self, sentences) -> Tensor:
        """Bag of hashed tokens -> mean of learned bucket embeddings, (B, static_dim)."""
        if self.static_table is None:
            raise ModelError("model was built without a static branch (static_dim = 0)")
        single = isinstance(sentences, str)
        rows = []
        dim = self.cfg.static_dim
        for s in [sentences] if single else sentences:
            ids = token_buckets(s, dim)
            if ids:
                rows.append(T.reshape(T.mean(T.embedding_lookup(self.static_table, ids), axis=0), (1, dim)))
            else:
                rows.append(Tensor(np.zeros((1, dim))))
        out = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        return T.reshape(out, (dim,)) if single else out

    def forward_classify(self, images: np.ndarray, static: Sequence[str] | Tensor | None = None) -> Tensor:
        feats = self.forward_features(images)
        pooled = T.mean(feats, axis=(1, 2))
        if self.cfg.static_dim:
            if static is None:
                raise ModelError("static branch enabled but no static input given")
            svec = static if isinstance(static, Tensor) else self.encode_static(list(static))
            if svec.shape != (pooled.shape[0], self.cfg.static_dim):
                raise ModelError(f"static vector shape {svec.shape} does not match static_dim {self.cfg.static_dim}")
            pooled = T.concat([pooled, svec], axis=-1)
        elif static is not None:
            raise ModelError("static input given but model has static_dim = 0")
        return self.head(pooled)

    def reconstruct(self, images: np.ndarray, mask_grid: np.ndarray) -> Tensor:
        feats = self.forward_features(images, mask_grid)
        B, h, w, _ = feats.shape
        s = self.cfg.stride
        pix = T.reshape(self.mim_head(feats), (B, h, w, s, s, 3))
        pix = T.reshape(T.transpose(pix, (0, 1, 3, 2, 4, 5)), (B, h * s, w * s, 3))
        H, W = images.shape[1:3]
        if h * s != H or w * s != W:
            pix = pix[:, :H, :W, :]
        return pix

    def forward_mim(self, images: np.ndarray, masks) -> tuple:
        """l1 reconstruction loss over masked pixels divided by their element count.

        Returns ``(loss, reconstruction)``.
        """
        grids = _mask_grids(masks, images.shape[0])
        p = self.cfg.patch_size
        pixel = np.repeat(np.repeat(grids, p, axis=1), p, axis=2)
        if pixel.shape != images.shape[:3]:
            raise ModelError(f"mask covers {pixel.shape[1:]} pixels but images are {images.shape[1:3]}")
        omega = int(pixel.sum()) * 3
        if omega == 0:
            raise ModelError("empty mask: no masked pixels to reconstruct")
        recon = self.reconstruct(images, grids)
        weight = np.broadcast_to(pixel[..., None], images.shape).astype(images.dtype)
        diff = T.abs_(T.sub(recon, Tensor(images)))
        loss = T.scale(T.sum_(T.mul(diff, Tensor(weight))), 1.0 / omega)
        return loss, recon

    def attention_summary(self, images: np.ndarray) -> np.ndarray:
        """Per-pixel received-attention heat map of the final stage, min-max scaled to [0, 1]."""
        with T.no_grad():
            self.forward_features(images, record=True)
        blocks = self.stages[-1].blocks
        maps = np.mean([blk.received for blk in blocks], axis=0)  # (B, h, w)
        for blk in blocks:
            blk.received = None
            blk.attn.last_attn = None
        stage_stride = self.cfg.patch_size * 2 ** (len(self.stages) - 1)
        heat = np.repeat(np.repeat(maps, stage_stride, axis=1), stage_stride, axis=2)
        heat = heat[:, :images.shape[1], :images.shape[2]]
        lo = heat.min(axis=(1, 2), keepdims=True)
        hi = heat.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        out = np.where(span > 0, (heat - lo) / np.where(span > 0, span, 1.0), 0.0)
        return out.astype(np.float64)


def _mask_grids(masks, batch: int) -> np.ndarray:
    if isinstance(masks, MimMask):
        masks = [masks] * batch
    if isinstance(masks, np.ndarray):
        grids = masks.astype(bool)
    else:
        grids = np.stack([m.grid if isinstance(m, MimMask) else np.asarray(m, dtype=bool) for m in masks])
    if grids.ndim != 3 or grids.shape[0] != batch:
        raise ModelError(f"expected {batch} mask grids, got array of shape {grids.shape}")
    return grids


def patch_embed(model: SwinClassifier, images: np.ndarray) -> FeatureMap:
    return FeatureMap(model.patch_embed_tokens(images))


def swin_block(block: SwinBlock, fm: FeatureMap) -> FeatureMap:
    return FeatureMap(block(fm.tokens))


def patch_merging(merge: PatchMerging, fm: FeatureMap) -> FeatureMap:
    return FeatureMap(merge(fm.tokens))
