"""The four training losses and their weighted total.

All losses are scalars on the gradient tape. The pseudo-label target is
always treated as a constant. Concrete forms: pixelwise cross-entropy,
soft Dice over class channels, negative top-2 softmax margin, and
KL(class usage || uniform). The registry allows swapping a form without
touching the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import PseudoLabelMask
from .tensor import ShapeError, Tensor, softmax, top2_margin

LOG_EPS = 1e-12
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    ce: float = 1.0
    un: float = 0.1
    cls: float = 0.1

    def __post_init__(self):
        vals = (self.seg, self.ce, self.un, self.cls)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"loss weights must be finite and >= 0, got {vals}")


def _check_pair(student: Tensor, pseudo: PseudoLabelMask, op: str) -> Tensor:
    if student.shape != pseudo.probs.shape:
        raise ShapeError(
            f"{op}: student {student.shape} does not match pseudo label {pseudo.probs.shape}"
        )
    return Tensor(pseudo.probs)


def ce_loss(student_probs: Tensor, pseudo: PseudoLabelMask) -> Tensor:
    """Mean over pixels of -sum_c pseudo_c * log(student_c + eps)."""
    target = _check_pair(student_probs, pseudo, "ce_loss")
    per_pixel = (target * (student_probs + LOG_EPS).log()).sum(axis=0)
    return -per_pixel.mean()


def seg_loss(student_probs: Tensor, pseudo: PseudoLabelMask) -> Tensor:
    """Soft Dice: 1 - mean_c (2 * overlap + eps) / (energy + eps)."""
    target = _check_pair(student_probs, pseudo, "seg_loss")
    inter = (student_probs * target).sum(axis=(1, 2))
    s_sq = (student_probs * student_probs).sum(axis=(1, 2))
    t_sq = (target * target).sum(axis=(1, 2))
    dice = (inter * 2.0 + DICE_EPS) / (s_sq + t_sq + DICE_EPS)
    return 1.0 - dice.mean()


def uncertainty_loss(student_logits: Tensor) -> Tensor:
    """Negative mean top-2 softmax margin; minimizing widens the margin."""
    if student_logits.ndim != 3 or student_logits.shape[0] < 2:
        raise ShapeError(
            f"uncertainty_loss needs (C>=2, H, W) logits, got {student_logits.shape}"
        )
    probs = softmax(student_logits, axis=0)
    return -top2_margin(probs, axis=0).mean()


def cls_loss(student_probs: Tensor) -> Tensor:
    """KL(class-usage distribution || uniform); zero iff usage is uniform."""
    if student_probs.ndim != 3:
        raise ShapeError(f"cls_loss needs (C, H, W) probabilities, got {student_probs.shape}")
    c = student_probs.shape[0]
    usage = student_probs.mean(axis=(1, 2))
    return (usage * (usage * float(c) + LOG_EPS).log()).sum()


def total_loss(seg: Tensor, ce: Tensor, un: Tensor, cls: Tensor, weights: LossWeights) -> Tensor:
    """Weighted sum lambda1*seg + lambda2*ce + lambda3*un + lambda4*cls."""
    parts = {"seg": seg, "ce": ce, "un": un, "cls": cls}
    for name, part in parts.items():
        if not isinstance(part, Tensor) or part.size != 1:
            raise ShapeError(f"total_loss: {name} must be a scalar tensor")
    return seg * weights.seg + ce * weights.ce + un * weights.un + cls * weights.cls


REGISTRY = {
    "seg": seg_loss,
    "ce": ce_loss,
    "un": uncertainty_loss,
    "cls": cls_loss,
}
