"""Segmentation metrics from a class confusion matrix; label 255 is ignored."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .errors import InvalidInputError

IGNORE = 255


def confusion_matrix(pred, gt, k: int) -> np.ndarray:
    """(k, k) counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
    keep = gt != IGNORE
    pred, gt = pred[keep], gt[keep]
    if np.any((gt < 0) | (gt >= k)) or np.any((pred < 0) | (pred >= k)):
        raise InvalidInputError(f"labels must lie in [0, {k}) or be {IGNORE}")
    return np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def scores_from_confusion(cm: np.ndarray) -> Tuple[float, float]:
    """(mean pixel accuracy, mean IoU).

    Accuracy averages over classes present in the ground truth; IoU over
    classes present in either prediction or ground truth.
    """
    cm = np.asarray(cm, dtype=np.int64)
    rows = cm.sum(axis=1)
    if rows.sum() == 0:
        raise InvalidInputError("ground truth has no labelled pixels")
    tp = np.diag(cm)
    union = rows + cm.sum(axis=0) - tp
    acc = (tp[rows > 0] / rows[rows > 0]).mean()
    iou = (tp[union > 0] / union[union > 0]).mean()
    return float(acc), float(iou)


def _classes(pred, gt, k: Optional[int]) -> int:
    if k is not None:
        return k
    labels = np.concatenate([np.ravel(pred), np.ravel(gt)]).astype(np.int64)
    labels = labels[labels != IGNORE]
    return int(labels.max()) + 1 if labels.size else 1


def mean_pixel_accuracy(pred, gt, k: Optional[int] = None) -> float:
    return scores_from_confusion(confusion_matrix(pred, gt, _classes(pred, gt, k)))[0]


def mean_iou(pred, gt, k: Optional[int] = None) -> float:
    return scores_from_confusion(confusion_matrix(pred, gt, _classes(pred, gt, k)))[1]


class ConfusionAccumulator:
    """Dataset-level confusion matrix; the sum is order independent."""

    def __init__(self, k: int):
        self.k = k
        self.cm = np.zeros((k, k), dtype=np.int64)

    def update(self, pred, gt) -> None:
        self.cm += confusion_matrix(pred, gt, self.k)

    def scores(self) -> Tuple[float, float]:
        return scores_from_confusion(self.cm)
