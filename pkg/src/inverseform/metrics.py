"""Segmentation metrics: confusion matrix, mIoU, pixel accuracy and mean boundary accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .boundary import sobel_boundary
from .errors import ContractError, DimensionError

DEFAULT_RADII = (1, 2, 3, 5)


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, pred, gt, num_classes):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        idx = num_classes * gt.reshape(-1).astype(np.int64) + pred.reshape(-1).astype(np.int64)
        return cls(np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes))

    def update(self, pred, gt):
        self.counts = self.counts + ConfusionMatrix.from_labels(pred, gt, len(self.counts)).counts
        return self

    def merge(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def _check(cm):
    if cm.total == 0:
        raise ContractError("confusion matrix is empty")


def iou_per_class(cm: ConfusionMatrix):
    """IoU per class; NaN for classes absent from the ground truth."""
    _check(cm)
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    gt_count = c.sum(axis=1)
    union = gt_count + c.sum(axis=0) - tp
    return np.where(gt_count > 0, tp / np.maximum(union, 1), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    return float(np.nanmean(iou_per_class(cm)))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    _check(cm)
    return float(np.trace(cm.counts) / cm.total)


def boundary_band(gt_labels, radius):
    """Pixels within Chebyshev distance ``radius`` of a ground-truth boundary pixel."""
    edges = sobel_boundary(gt_labels).values > 0
    if radius <= 0:
        return edges
    return ndimage.maximum_filter(edges, size=2 * radius + 1, mode="constant", cval=False)


def mba_detailed(pred_labels, gt_labels, radii=DEFAULT_RADII):
    """Returns (mBA, vacuous). ``vacuous`` is True when the ground truth has no boundary."""
    pred, gt = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not (sobel_boundary(gt).values > 0).any():
        return 1.0, True
    correct = pred == gt
    accs = [float(correct[band].mean()) for band in (boundary_band(gt, r) for r in radii)]
    return float(np.mean(accs)), False


def mba(pred_labels, gt_labels, radii=DEFAULT_RADII) -> float:
    return mba_detailed(pred_labels, gt_labels, radii)[0]


def mean_mba(preds, gts, radii=DEFAULT_RADII):
    """Average mBA over a set of images."""
    return float(np.mean([mba(p, g, radii) for p, g in zip(preds, gts)]))
