"""Dice similarity from per-class confusion counts.

``DSC = 2TP / (2TP + FP + FN)``.  A class absent from both maps scores 1.
mDSC averages foreground classes (class 0 is background) that are present in
the ground truth; if none are, it averages all foreground scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def gt_positives(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def pred_positives(self) -> np.ndarray:
        return self.tp + self.fp


def confusion_counts(pred: np.ndarray, gt: np.ndarray, classes: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    cm = np.bincount(gt.ravel().astype(np.int64) * classes + pred.ravel().astype(np.int64),
                     minlength=classes * classes).reshape(classes, classes)
    tp = np.diag(cm).copy()
    return ConfusionCounts(tp=tp, fp=cm.sum(axis=0) - tp, fn=cm.sum(axis=1) - tp)


def dice_from_counts(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, 2 * tp / safe, 1.0)


def dsc(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    p = np.asarray(pred) == class_id
    g = np.asarray(gt) == class_id
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} disagree")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return float(dice_from_counts(tp, fp, fn))


def mdsc(pred: np.ndarray, gt: np.ndarray, classes: int) -> tuple[float, np.ndarray]:
    """Mean foreground DSC of one map pair and the per-class scores for classes 1..classes-1."""
    counts = confusion_counts(pred, gt, classes)
    per_class = dice_from_counts(counts.tp, counts.fp, counts.fn)[1:]
    present = counts.gt_positives[1:] > 0
    chosen = per_class[present] if present.any() else per_class
    return float(chosen.mean()), per_class


def dataset_mdsc(preds: np.ndarray, gts: np.ndarray, classes: int) -> tuple[float, np.ndarray]:
    """Per-image DSC averaged per class over images whose ground truth contains the class.

    Classes never present in any ground truth come back as NaN and are left
    out of the mean.
    """
    sums = np.zeros(classes - 1)
    hits = np.zeros(classes - 1)
    for pred, gt in zip(preds, gts):
        counts = confusion_counts(pred, gt, classes)
        present = counts.gt_positives[1:] > 0
        sums += np.where(present, dice_from_counts(counts.tp, counts.fp, counts.fn)[1:], 0.0)
        hits += present
    per_class = np.full(classes - 1, np.nan)
    np.divide(sums, hits, out=per_class, where=hits > 0)
    valid = per_class[hits > 0]
    return (float(valid.mean()) if valid.size else float("nan")), per_class
