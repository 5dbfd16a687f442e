"""Segmentation scoring: confusion counts, Hungarian class matching, mIoU/Acc.

Unsupervised predictions carry arbitrary class ids, so scoring optionally
relabels predictions by the permutation that maximizes the matched pixel
count (exact assignment). Classes absent from both prediction and ground
truth are excluded from the mIoU mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class EvalReport:
    miou: float
    accuracy: float
    per_class_iou: tuple[float, ...]  # nan marks classes absent from pred and gt
    matching: tuple[int, ...]         # prediction label i was scored as matching[i]

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "acc": self.accuracy,
            "per_class_iou": [None if np.isnan(v) else v for v in self.per_class_iou],
            "matching": list(self.matching),
        }


def confusion_matrix(pred_labels, gt_labels, num_classes: int) -> np.ndarray:
    """counts[i, j] = number of pixels predicted i with ground truth j."""
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= num_classes:
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    counts = np.bincount(pred * num_classes + gt, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def hungarian_match(confusion: np.ndarray) -> np.ndarray:
    """Permutation maximizing the total matched count (exact assignment)."""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {confusion.shape}")
    if confusion.min(initial=0) < 0:
        raise ValueError("confusion counts must be non-negative")
    _, cols = linear_sum_assignment(-confusion.astype(np.float64))
    return cols


def evaluate(pred_labels, gt_labels, num_classes: int, use_matching: bool = True) -> EvalReport:
    return report_from_confusion(
        confusion_matrix(pred_labels, gt_labels, num_classes), use_matching
    )


def report_from_confusion(confusion: np.ndarray, use_matching: bool = True) -> EvalReport:
    num_classes = confusion.shape[0]
    if use_matching:
        perm = hungarian_match(confusion)
        confusion = confusion[np.argsort(perm)]  # row i becomes scored class perm[i]
    else:
        perm = np.arange(num_classes)

    gt_counts = confusion.sum(axis=0)
    pred_counts = confusion.sum(axis=1)
    tp = np.diag(confusion)
    union = gt_counts + pred_counts - tp
    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]

    total = confusion.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    miou = float(np.nanmean(iou)) if present.any() else 0.0
    return EvalReport(
        miou=miou,
        accuracy=accuracy,
        per_class_iou=tuple(float(v) for v in iou),
        matching=tuple(int(v) for v in perm),
    )
