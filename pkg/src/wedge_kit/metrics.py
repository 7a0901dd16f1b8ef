"""Confusion matrices, IoU and pseudo-label quality."""
from __future__ import annotations

import csv
import io
from typing import Optional, Sequence

import numpy as np

from .features import IGNORE, LabelMap, ShapeError


class EvaluationError(ValueError):
    pass


class ConfusionMatrix:
    """Pixel counts with rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise ShapeError(f"counts must be {num_classes}x{num_classes}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and self.num_classes == other.num_classes
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self):
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


def accumulate(cm: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Return ``cm`` plus the counts for one image; IGNORE ground-truth pixels are skipped."""
    p, g = np.asarray(getattr(pred, "data", pred)), np.asarray(getattr(gt, "data", gt))
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    keep = g != IGNORE
    g = g[keep].astype(np.int64)
    p = p[keep].astype(np.int64)
    if p.size and p.max() >= cm.num_classes:
        # an IGNORE prediction on a labeled pixel is not a class; skip it
        ok = p < cm.num_classes
        g, p = g[ok], p[ok]
    n = cm.num_classes
    add = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.counts + add)


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN where a class never occurs) and their mean over present classes."""
    if cm.total == 0:
        raise EvaluationError("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)
    return iou, float(np.nanmean(iou))


def pseudo_label_quality(pseudo: LabelMap, gt: LabelMap):
    """``(precision, coverage)``; precision is None when nothing is labeled."""
    p, g = pseudo.data, gt.data
    if p.shape != g.shape:
        raise ShapeError(f"pseudo labels {p.shape} and ground truth {g.shape} differ")
    labeled = p != IGNORE
    coverage = float(labeled.mean())
    if not labeled.any():
        return None, coverage
    return float((p[labeled] == g[labeled]).mean()), coverage


def iou_table_csv(per_class: np.ndarray, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou"])
    for name, v in zip(class_names, per_class):
        w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
    return buf.getvalue()
