"""Ranking and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic with ties counted as half, via midranks."""
    s, y = _binary_inputs(scores, labels)
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0:
        raise MetricError("auroc needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size)
    # midrank for each block of equal scores
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], s.size]
    mid = (starts + ends - 1) / 2.0 + 1.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y].sum() - P * (P + 1) / 2.0
    return float(u / (P * N))


def auprc(scores, labels) -> float:
    """Average precision; tied scores enter as a single threshold."""
    s, y = _binary_inputs(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise MetricError("auprc needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    ss, yy = s[order], y[order]
    last = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tp = np.cumsum(yy)[last]
    prec = tp / (last + 1)
    # sum integer recall steps before dividing so a perfect ranking gives exactly 1
    return float(np.sum(np.diff(np.r_[0, tp]) * prec) / P)


def multiclass_metrics(preds, labels, C: int) -> tuple:
    """Accuracy and macro precision, recall, F1; classes with no support score 0."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != y.shape:
        raise MetricError(f"{p.size} predictions but {y.size} labels")
    if p.size == 0:
        raise MetricError("no predictions")
    if ((p < 0) | (p >= C) | (y < 0) | (y >= C)).any():
        raise MetricError(f"class ids must lie in 0..{C - 1}")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_n, true_n = cm.sum(axis=0), cm.sum(axis=1)
    prec = np.divide(tp, pred_n, out=np.zeros(C), where=pred_n > 0)
    rec = np.divide(tp, true_n, out=np.zeros(C), where=true_n > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(C), where=denom > 0)
    return float(tp.sum() / p.size), float(prec.mean()), float(rec.mean()), float(f1.mean())


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def compute_metrics(logits: np.ndarray, labels, num_classes: int) -> dict:
    """All metrics for one split. Binary tasks add auroc/auprc on the positive-class probability."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    preds = logits.argmax(axis=1)
    acc, prec, rec, f1 = multiclass_metrics(preds, y, num_classes)
    out = {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1}
    if num_classes == 2:
        prob = softmax_np(logits)[:, 1]
        if 0 < y.sum() < y.size:
            out["auroc"] = auroc(prob, y)
            out["auprc"] = auprc(prob, y)
        else:
            out["auroc"] = out["auprc"] = float("nan")
    return out


def selection_key(metrics: dict, num_classes: int) -> tuple:
    """Best-checkpoint ordering: auroc for binary tasks, accuracy otherwise; accuracy breaks ties."""
    if num_classes == 2 and np.isfinite(metrics.get("auroc", np.nan)):
        return (metrics["auroc"], metrics["accuracy"])
    return (metrics["accuracy"], metrics["accuracy"])


@dataclass
class MetricsReport:
    per_split: list = field(default_factory=list)  # one metrics dict per data split / seed
    averaging: str = "macro"

    def add(self, metrics: dict) -> None:
        self.per_split.append(dict(metrics))

    def keys(self) -> list:
        return list(self.per_split[0]) if self.per_split else []

    def mean(self) -> dict:
        return {k: float(np.mean([m[k] for m in self.per_split])) for k in self.keys()}

    def sd(self) -> dict:
        n = len(self.per_split)
        return {k: float(np.std([m[k] for m in self.per_split], ddof=1)) if n > 1 else 0.0
                for k in self.keys()}

    def to_dict(self) -> dict:
        return {"averaging": self.averaging, "per_split": self.per_split,
                "mean": self.mean(), "sd": self.sd()}
