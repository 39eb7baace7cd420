"""Independent reference implementations used as test oracles.

These deliberately take the slow, obvious route (loops, pairwise
enumeration, explicit sorting) so they share no code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def grid_by_scan(D: int) -> tuple:
    """Walk l upward until one of the two layout bands contains D."""
    l = 1
    while True:
        if l * (l - 1) < D <= l * l:
            return (l, l)
        if l * l < D <= l * (l + 1):
            return (l, l + 1)
        l += 1


def quantile_type7(values, q: float) -> float:
    s = sorted(values)
    h = (len(s) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def iqr_limits(values, k=1.5):
    q1, q3 = quantile_type7(values, 0.25), quantile_type7(values, 0.75)
    return q1 - k * (q3 - q1), q3 + k * (q3 - q1)


def sd_limits(values, k=3.0):
    n = len(values)
    mu = math.fsum(values) / n
    var = math.fsum((v - mu) ** 2 for v in values) / (n - 1)
    return mu - k * math.sqrt(var), mu + k * math.sqrt(var)


def median(values) -> float:
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def mzs_limits(values, threshold=3.5):
    med = median(values)
    mad = median([abs(v - med) for v in values])
    half = threshold * mad / 0.6745
    return med - half, med + half


def clipped(lohi, values):
    lo, hi = lohi
    return max(lo, min(values)), min(hi, max(values))


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def auprc_thresholds(scores, labels) -> float:
    """Average precision by enumerating each distinct threshold from high to low."""
    P = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(chosen)
        recall = tp / P
        ap += (recall - prev_recall) * (tp / len(chosen))
        prev_recall = recall
    return ap


def dense_attention(x, wqkv, bqkv, wproj, bproj, heads, bias=None, mask=None):
    """Plain per-window multi-head attention with explicit loops over heads. x: (N, C)."""
    N, C = x.shape
    hd = C // heads
    qkv = x @ wqkv + bqkv
    q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = (q[:, sl] / math.sqrt(hd)) @ k[:, sl].T
        if bias is not None:
            logits = logits + bias[h]
        if mask is not None:
            logits = logits + mask
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w = w / w.sum(axis=1, keepdims=True)
        weights.append(w)
        outs.append(w @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wproj + bproj, weights


def relative_bias(table, window):
    """Bias[h, i, j] from the (2w-1)^2 x heads table, by explicit coordinate arithmetic."""
    n = window * window
    out = np.zeros((table.shape[1], n, n))
    for i in range(n):
        for j in range(n):
            di = i // window - j // window + window - 1
            dj = i % window - j % window + window - 1
            out[:, i, j] = table[di * (2 * window - 1) + dj]
    return out


def l1_masked(recon, target, pixel_mask):
    """Sum of |recon - target| over masked pixels divided by masked element count."""
    total, count = 0.0, 0
    B, H, W, Ch = target.shape
    for b in range(B):
        for y in range(H):
            for x in range(W):
                if pixel_mask[b, y, x]:
                    for c in range(Ch):
                        total += abs(float(recon[b, y, x, c]) - float(target[b, y, x, c]))
                        count += 1
    return total / count
