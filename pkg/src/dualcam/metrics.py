"""Confusion-matrix segmentation metrics: mIoU, over-activation rate,
and pseudo-label quality."""

from __future__ import annotations

import numpy as np

from .cam import IGNORE
from .errors import DataError


class ConfusionMatrix:
    """(C+1)x(C+1) counts, rows = ground truth, columns = prediction.
    Pixels with ground truth 255 are excluded. Accumulation is associative
    and commutative, so per-image matrices can be summed in any order."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        if pred.shape != gt.shape:
            raise DataError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != IGNORE
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        k = self.num_classes + 1
        if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
            raise DataError("label values out of range")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix) -> tuple[float | None, np.ndarray]:
    """Mean IoU and per-class IoU (NaN where TP+FP+FN == 0; such classes are
    excluded from the mean). Returns (None, all-NaN) for an empty matrix."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    if not np.any(denom > 0):
        return None, per_class
    return float(np.nanmean(per_class)), per_class


def over_activation_rate(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class FP / (TP + FP), indexed by label id; background (index 0)
    and classes never predicted are NaN."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    pred_total = tp + fp
    oa = np.where(pred_total > 0, fp / np.maximum(pred_total, 1), np.nan)
    oa[0] = np.nan
    return oa


def pseudolabel_quality(label_maps, gt_maps, num_classes: int) -> dict:
    """mIoU of pseudo-labels against ground truth over pixels where the
    pseudo-label is not ignore, plus coverage (fraction of non-ignore
    pseudo-label pixels) and the per-class over-activation rate."""
    cm = ConfusionMatrix(num_classes)
    covered = 0
    total = 0
    for labels, gt in zip(label_maps, gt_maps):
        defined = labels != IGNORE
        covered += int(defined.sum())
        total += labels.size
        masked_gt = np.where(defined, gt, IGNORE).astype(gt.dtype)
        cm.accumulate(np.where(defined, labels, 0), masked_gt)
    mean_iou, per_class = miou(cm)
    return {
        "miou": mean_iou,
        "per_class_iou": per_class,
        "coverage": covered / total if total else 0.0,
        "oa_rate": over_activation_rate(cm),
        "confusion": cm,
    }
