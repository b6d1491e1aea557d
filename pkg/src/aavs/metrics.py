"""Dataset-level mIoU and F-score.

Counts are accumulated over every frame of a split and divided at the end.
Accumulators merge by addition, so evaluation shards can be combined.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class EvalReport:
    miou: float
    fscore: float
    per_class_iou: dict[int, float]
    counts: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "fscore": self.fscore,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "counts": self.counts,
        }


class SegmentationAccumulator:
    """Per-class intersection/union/TP/FP/FN counts for labels ``0..num_classes``.

    ``num_classes=1`` is the binary (AVS) case. Background (label 0) is excluded
    from the averages unless ``include_background``.
    """

    def __init__(self, num_classes: int, beta2: float = 0.3, include_background: bool = False):
        self.num_classes = num_classes
        self.beta2 = beta2
        self.include_background = include_background
        n = num_classes + 1
        self.intersection = np.zeros(n, np.int64)
        self.union = np.zeros(n, np.int64)
        self.tp = np.zeros(n, np.int64)
        self.fp = np.zeros(n, np.int64)
        self.fn = np.zeros(n, np.int64)

    def update(self, pred, gt) -> "SegmentationAccumulator":
        pred = np.asarray(pred).astype(np.int64).ravel()
        gt = np.asarray(gt).astype(np.int64).ravel()
        if pred.shape != gt.shape:
            raise MetricError("prediction and ground truth differ in size")
        n = self.num_classes + 1
        if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n):
            raise MetricError(f"labels must lie in 0..{self.num_classes}")
        conf = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)  # rows gt, cols pred
        diag = np.diag(conf)
        gt_count = conf.sum(axis=1)
        pred_count = conf.sum(axis=0)
        self.intersection += diag
        self.union += gt_count + pred_count - diag
        self.tp += diag
        self.fp += pred_count - diag
        self.fn += gt_count - diag
        return self

    def merge(self, other: "SegmentationAccumulator") -> "SegmentationAccumulator":
        out = SegmentationAccumulator(self.num_classes, self.beta2, self.include_background)
        for name in ("intersection", "union", "tp", "fp", "fn"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def _classes(self):
        start = 0 if self.include_background else 1
        return range(start, self.num_classes + 1)

    def per_class_iou(self) -> dict[int, float]:
        return {c: float(self.intersection[c] / self.union[c]) for c in self._classes() if self.union[c] > 0}

    def miou(self) -> float:
        ious = self.per_class_iou()
        if not ious:
            raise MetricError("every class has an empty union; mIoU is undefined")
        return float(np.mean(list(ious.values())))

    def fscore(self) -> float:
        cls = list(self._classes())
        tp, fp, fn = (int(a[cls].sum()) for a in (self.tp, self.fp, self.fn))
        if tp + fp + fn == 0:
            raise MetricError("no foreground in prediction or ground truth; F-score is undefined")
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        return f_beta(precision, recall, self.beta2)

    def report(self) -> EvalReport:
        return EvalReport(
            miou=self.miou(), fscore=self.fscore(), per_class_iou=self.per_class_iou(),
            counts={k: getattr(self, k).tolist() for k in ("intersection", "union", "tp", "fp", "fn")},
        )


def f_beta(precision: float, recall: float, beta2: float = 0.3) -> float:
    denom = beta2 * precision + recall
    return 0.0 if denom == 0 else (1 + beta2) * precision * recall / denom


def miou(pred, gt, num_classes: int, include_background: bool = False) -> float:
    return SegmentationAccumulator(num_classes, include_background=include_background).update(pred, gt).miou()


def fscore(pred, gt, num_classes: int = 1, beta2: float = 0.3) -> float:
    return SegmentationAccumulator(num_classes, beta2).update(pred, gt).fscore()


def binary_iou(pred, gt) -> float:
    """IoU of two foreground masks (nonzero = foreground)."""
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    return miou(p, g, 1)
