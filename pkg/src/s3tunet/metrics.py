"""Segmentation metrics and the BCE + Dice training loss.

Hard metrics binarise predictions at 0.5 (p >= 0.5 is foreground). Empty
reference sets score 1.0 when the prediction agrees with them and 0.0
otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

THRESHOLD = 0.5
CLAMP = 1e-7
REPORT_KEYS = ("dsc", "acc", "miou", "precision", "sensitivity", "n_samples")

_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # renamed in numpy 2.0


def _arrays(p, g):
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    return p, g


def binarize(p, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(p) >= threshold


def confusion(p, g) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) after thresholding the prediction."""
    p, g = _arrays(p, g)
    a, b = binarize(p), g >= 0.5
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    tn = a.size - tp - fp - fn
    return tp, fp, tn, fn


def _ratio(num, den, agree):
    if den == 0:
        return 1.0 if agree else 0.0
    return num / den


def dsc(p, g, soft: bool = False) -> float:
    p, g = _arrays(p, g)
    if soft:
        den = float(np.sum(p * p) + np.sum(g * g))
        return 1.0 if den == 0 else 2.0 * float(np.sum(p * g)) / den
    tp, fp, _, fn = confusion(p, g)
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2.0 * tp / den


def sensitivity(p, g) -> float:
    tp, fp, _, fn = confusion(p, g)
    return _ratio(tp, tp + fn, agree=fp == 0)


def precision(p, g) -> float:
    tp, fp, _, fn = confusion(p, g)
    return _ratio(tp, tp + fp, agree=fn == 0)


def accuracy(p, g) -> float:
    tp, fp, tn, fn = confusion(p, g)
    return (tp + tn) / (tp + fp + tn + fn)


def miou(p, g) -> float:
    """Mean of foreground and background IoU."""
    tp, fp, tn, fn = confusion(p, g)
    fg = _ratio(tp, tp + fp + fn, agree=True)
    bg = _ratio(tn, tn + fp + fn, agree=True)
    return 0.5 * (fg + bg)


def roc_auc(p, g) -> float:
    """Area under the ROC curve by the trapezoid rule over all thresholds."""
    p, g = _arrays(p, g)
    p, g = p.ravel(), g.ravel() >= 0.5
    pos, neg = int(g.sum()), int((~g).sum())
    if pos == 0 or neg == 0:
        raise ValueError("ROC AUC needs both classes present")
    order = np.argsort(-p, kind="mergesort")
    p, g = p[order], g[order]
    distinct = np.r_[np.nonzero(np.diff(p))[0], p.size - 1]
    tpr = np.r_[0.0, np.cumsum(g)[distinct] / pos]
    fpr = np.r_[0.0, np.cumsum(~g)[distinct] / neg]
    return float(_trapezoid(tpr, fpr))


@dataclass
class MetricReport:
    dsc: float
    acc: float
    miou: float
    precision: float
    sensitivity: float
    n_samples: int
    per_sample: list | None = field(default=None, repr=False)

    def to_dict(self, include_per_sample: bool = False) -> dict:
        d = {k: getattr(self, k) for k in REPORT_KEYS}
        if include_per_sample and self.per_sample is not None:
            d["per_sample"] = self.per_sample
        return d

    def to_json(self, include_per_sample: bool = False) -> str:
        return json.dumps(self.to_dict(include_per_sample), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d[k] for k in REPORT_KEYS}, per_sample=d.get("per_sample"))


def sample_metrics(p, g) -> dict:
    return {
        "dsc": dsc(p, g), "acc": accuracy(p, g), "miou": miou(p, g),
        "precision": precision(p, g), "sensitivity": sensitivity(p, g),
    }


def metric_report(preds, gts, ids=None) -> MetricReport:
    """Per-sample hard metrics averaged over samples."""
    rows = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        row = sample_metrics(p, g)
        if ids is not None:
            row["id"] = ids[i]
        rows.append(row)
    if not rows:
        raise ValueError("metric_report needs at least one sample")
    means = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_KEYS[:-1]}
    return MetricReport(**means, n_samples=len(rows), per_sample=rows)


def bce_dice_loss(p, g, w_bce: float = 0.5, w_dice: float = 0.5) -> Tensor:
    """w_bce * BCE(p, g) + w_dice * (1 - soft Dice), p clamped to [1e-7, 1 - 1e-7]."""
    p, g = as_tensor(p), as_tensor(g)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    pc = ops.clip(p, CLAMP, 1.0 - CLAMP)
    gd = g.data
    bce = ops.neg(ops.mean(ops.add(ops.mul(gd, ops.log(pc)),
                                   ops.mul(1.0 - gd, ops.log(ops.sub(1.0, pc))))))
    inter = ops.sum(ops.mul(pc, gd))
    den = ops.add(ops.sum(ops.square(pc)), float(np.sum(gd * gd)))
    soft_dsc = ops.div(ops.mul(inter, 2.0), den)
    return ops.add(ops.mul(bce, w_bce), ops.mul(ops.sub(1.0, soft_dsc), w_dice))
