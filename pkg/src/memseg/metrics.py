from __future__ import annotations

import logging
from fractions import Fraction

import numpy as np

from .tensor import ShapeError

log = logging.getLogger(__name__)

IGNORE = 255


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None
                       else np.array(counts, dtype=np.int64))

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != IGNORE
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if g.size and (g.max() >= k or p.max() >= k or g.min() < 0 or p.min() < 0):
            raise ValueError(f"labels outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> list:
        """IoU per class, None where the class has no union."""
        inter = np.diag(self.counts)
        union = self.counts.sum(0) + self.counts.sum(1) - inter
        return [None if u == 0 else float(i / u) for i, u in zip(inter, union)]

    def miou(self) -> float:
        """Mean IoU over classes with nonzero union, rounded once from the exact rational."""
        inter = np.diag(self.counts)
        union = self.counts.sum(0) + self.counts.sum(1) - inter
        vals = [Fraction(int(i), int(u)) for i, u in zip(inter, union) if u]
        if not vals:
            log.warning("no class has a nonzero union; mIoU defined as 0")
            return 0.0
        return float(sum(vals) / len(vals))

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def report(self) -> dict:
        return {"miou": self.miou(), "per_class_iou": self.per_class_iou(),
                "pixel_acc": self.pixel_accuracy()}


def confusion(pred, gt, acc: ConfusionMatrix) -> ConfusionMatrix:
    return acc.add(pred, gt)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def evaluate(preds, gts, num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts, strict=True):
        cm.add(p, g)
    return cm
