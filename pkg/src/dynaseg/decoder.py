"""Class-mask decoding, CAM pseudo-label seeds, and mask fusion.

Token masks come from a mask-transformer-style dot product between patch
tokens and one learned embedding per class (class token stripped before
decoding). CAM seeds are the relu of class-weighted feature channels,
max-normalized per class. Fusion is a per-pixel convex combination.
"""

from __future__ import annotations

import math

import numpy as np

from .conv import bilinear_upsample
from .tensor import ShapeError, Tensor, reshape, softmax, transpose

PIXEL_SUM_TOL = 1e-6


class PseudoLabelMask:
    """Per-pixel class distribution (C, H, W); detached from any tape."""

    __slots__ = ("probs",)

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ShapeError(f"mask must be (C, H, W), got {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise ValueError("mask contains non-finite values")
        if probs.min() < -1e-9 or probs.max() > 1.0 + 1e-9:
            raise ValueError("mask entries must lie in [0, 1]")
        sums = probs.sum(axis=0)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > PIXEL_SUM_TOL:
            raise ValueError(f"mask pixels must sum to 1 +- {PIXEL_SUM_TOL}, worst {worst:.3e}")
        self.probs = np.clip(probs, 0.0, 1.0)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.probs.shape[1], self.probs.shape[2]

    def labels(self) -> np.ndarray:
        """Per-pixel argmax labels (H, W) int64."""
        return self.probs.argmax(axis=0)

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int) -> "PseudoLabelMask":
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError(f"labels out of range for {num_classes} classes")
        probs = np.zeros((num_classes,) + labels.shape, dtype=np.float64)
        np.put_along_axis(probs, labels[None], 1.0, axis=0)
        return cls(probs)

    @classmethod
    def from_tensor(cls, probs: Tensor) -> "PseudoLabelMask":
        return cls(probs.data)


def mask_logits(z_mask: Tensor, class_emb: Tensor) -> Tensor:
    """Token-class scores z c^T / sqrt(D): (N, C)."""
    if class_emb.ndim != 2 or class_emb.shape[0] < 2:
        raise ShapeError(f"class embeddings must be (C>=2, D), got {class_emb.shape}")
    if z_mask.ndim != 2 or z_mask.shape[1] != class_emb.shape[1]:
        raise ShapeError(
            f"embedding width mismatch: tokens {z_mask.shape} vs classes {class_emb.shape}"
        )
    d = class_emb.shape[1]
    return (z_mask @ transpose(class_emb)) * (1.0 / math.sqrt(d))


def decode_masks(z_mask: Tensor, class_emb: Tensor) -> Tensor:
    """Per-token class distribution softmax(z c^T / sqrt(D)): (N, C).

    `z_mask` carries patch tokens only; strip the class token first.
    """
    return softmax(mask_logits(z_mask, class_emb), axis=1)


def _token_grid(token_maps: Tensor) -> Tensor:
    n, c = token_maps.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ShapeError(f"token count {n} is not a perfect square")
    return reshape(transpose(token_maps), (c, g, g))


def full_res_probs(token_masks: Tensor, height: int, width: int) -> Tensor:
    """Differentiable (N, C) -> (C, H, W): reshape, bilinear upsample, renormalize."""
    up = bilinear_upsample(_token_grid(token_masks), height, width)
    return up / up.sum(axis=0, keepdims=True)


def full_res_logits(token_logits: Tensor, height: int, width: int) -> Tensor:
    """Upsampled raw scores (no renormalization), for margin-style losses."""
    return bilinear_upsample(_token_grid(token_logits), height, width)


def masks_to_full_res(token_masks: Tensor, height: int, width: int) -> PseudoLabelMask:
    return PseudoLabelMask.from_tensor(full_res_probs(token_masks, height, width))


def cam(features, alpha, normalize: bool = True) -> np.ndarray:
    """Class activation maps relu(sum_k alpha[c, k] * features[k]).

    With `normalize` (the default) each class map is divided by its own
    maximum, landing in [0, 1]; all-zero maps stay zero. Unnormalized maps
    keep the raw activation scale, which makes downstream softmax seeding
    sharper.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    al = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=np.float64)
    if feats.ndim != 3 or al.ndim != 2 or al.shape[1] != feats.shape[0]:
        raise ShapeError(f"cam: alpha {al.shape} does not match features {feats.shape}")
    maps = np.maximum(np.tensordot(al, feats, axes=1), 0.0)
    if not normalize:
        return maps
    peaks = maps.max(axis=(1, 2), keepdims=True)
    return np.where(peaks > 0, maps / np.where(peaks > 0, peaks, 1.0), 0.0)


def cam_to_initial_labels(cam_maps: np.ndarray, background_threshold: float = 0.25) -> PseudoLabelMask:
    """Initial pseudo labels: softmax over class activations, background where weak.

    Pixels whose strongest activation falls below the threshold are assigned
    one-hot to the background class 0.
    """
    if not 0.0 < background_threshold < 1.0:
        raise ValueError(f"background threshold must be in (0, 1), got {background_threshold}")
    maps = np.asarray(cam_maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ShapeError(f"cam maps must be (C, H, W), got {maps.shape}")
    shifted = maps - maps.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=0, keepdims=True)
    weak = maps.max(axis=0) < background_threshold
    probs[:, weak] = 0.0
    probs[0, weak] = 1.0
    return PseudoLabelMask(probs)


def fuse_masks(cam_mask: PseudoLabelMask, teacher_mask: PseudoLabelMask, beta: float) -> PseudoLabelMask:
    """Per-pixel convex combination beta * cam + (1 - beta) * teacher, renormalized."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"fusion weight must be in [0, 1], got {beta}")
    if cam_mask.probs.shape != teacher_mask.probs.shape:
        raise ShapeError(
            f"mask shapes differ: {cam_mask.probs.shape} vs {teacher_mask.probs.shape}"
        )
    mixed = beta * cam_mask.probs + (1.0 - beta) * teacher_mask.probs
    return PseudoLabelMask(mixed / mixed.sum(axis=0, keepdims=True))
