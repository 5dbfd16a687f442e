"""Pixel-adaptive refinement over multi-dilation neighbor rings.

For each pixel, an affinity kernel mixes a color term and a positional
term over its neighbor set (the 8-ring at every dilation in the list,
out-of-bounds positions dropped). Both terms are squared differences
scaled by per-pixel local statistics, softmaxed over the neighbor set,
combined as softmax(k_rgb) + omega3 * softmax(k_pos), and divided by
(1 + omega3) so the weights per pixel sum to 1. Refinement iterates the
resulting averaging operator over each class channel; it runs detached
from any gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import PseudoLabelMask
from .tensor import ShapeError, Tensor

WEIGHT_SUM_TOL = 1e-6
SIGMA_FLOOR = 1e-8

_RING = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class ParParams:
    dilation_list: tuple[int, ...] = (1, 2, 4, 8)
    w1: float = 0.3
    w2: float = 0.01
    omega3: float = 0.01
    iterations: int = 10

    def __post_init__(self):
        if not self.dilation_list or any(d < 1 for d in self.dilation_list):
            raise ValueError(f"dilation list must be non-empty and positive: {self.dilation_list}")
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError("bandwidth scales must be positive")
        if self.omega3 < 0:
            raise ValueError("positional mixing weight must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def ring_offsets(dilation_list) -> list[tuple[int, int]]:
    """Chebyshev-ring offsets, 8 per dilation, in a fixed deterministic order."""
    return [(dy * d, dx * d) for d in dilation_list for dy, dx in _RING]


def neighbor_set(pos: tuple[int, int], height: int, width: int, dilation_list) -> list[tuple[int, int]]:
    """In-bounds neighbors of a pixel, in ring-offset order."""
    i, j = pos
    if not (0 <= i < height and 0 <= j < width):
        raise ValueError(f"position {pos} outside {height}x{width} grid")
    out = []
    for dy, dx in ring_offsets(dilation_list):
        k, l = i + dy, j + dx
        if 0 <= k < height and 0 <= l < width:
            out.append((k, l))
    return out


@dataclass(frozen=True)
class AffinityKernel:
    """Per-pixel normalized weights over the neighbor offsets (zeros where clipped)."""

    offsets: tuple[tuple[int, int], ...]
    weights: np.ndarray  # (P, H, W)
    valid: np.ndarray    # (P, H, W) bool

    def __post_init__(self):
        if self.weights.shape != self.valid.shape or self.weights.shape[0] != len(self.offsets):
            raise ShapeError("affinity kernel arrays do not line up with the offsets")
        if self.weights.min() < 0:
            raise ValueError("affinity weights must be non-negative")
        sums = self.weights.sum(axis=0)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > WEIGHT_SUM_TOL:
            raise ValueError(f"per-pixel weights must sum to 1 +- {WEIGHT_SUM_TOL}, worst {worst:.3e}")


def _gather(values: np.ndarray, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    """values[..., i+dy, j+dx] with zero fill; also the in-bounds mask (H, W)."""
    h, w = values.shape[-2:]
    out = np.zeros_like(values)
    mask = np.zeros((h, w), dtype=bool)
    i_lo, i_hi = max(0, -dy), min(h, h - dy)
    j_lo, j_hi = max(0, -dx), min(w, w - dx)
    if i_lo < i_hi and j_lo < j_hi:
        out[..., i_lo:i_hi, j_lo:j_hi] = values[..., i_lo + dy : i_hi + dy, j_lo + dx : j_hi + dx]
        mask[i_lo:i_hi, j_lo:j_hi] = True
    return out, mask


def _masked_std(values: np.ndarray, valid: np.ndarray, counts: np.ndarray) -> np.ndarray:
    mean = (values * valid).sum(axis=0) / counts
    var = (((values - mean) ** 2) * valid).sum(axis=0) / counts
    return np.sqrt(var)


def _masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    z = np.where(valid, logits, -np.inf)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def affinity_kernel(image, params: ParParams) -> AffinityKernel:
    """Eq.-style affinity: color and positional softmaxes mixed and normalized."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    _, h, w = img.shape
    offsets = tuple(ring_offsets(params.dilation_list))
    p = len(offsets)

    valid = np.zeros((p, h, w), dtype=bool)
    rgb_sq = np.zeros((p, h, w))
    rgb_sum = np.zeros((p, h, w))
    pos_sq = np.zeros(p)
    pos_sum = np.zeros(p)
    for idx, (dy, dx) in enumerate(offsets):
        shifted, mask = _gather(img, dy, dx)
        diff = (img - shifted) * mask
        rgb_sq[idx] = (diff * diff).sum(axis=0)
        rgb_sum[idx] = diff.sum(axis=0)
        valid[idx] = mask
        pos_sq[idx] = dy * dy + dx * dx          # |(i,j) - (k,l)|^2
        pos_sum[idx] = -(dy + dx)                # coordinate-summed difference

    counts = valid.sum(axis=0)
    if counts.min() == 0:
        raise ValueError("a pixel has no in-bounds neighbors; grid too small for the dilations")

    sigma_rgb = np.maximum(_masked_std(rgb_sum, valid, counts), SIGMA_FLOOR)
    sigma_pos = np.maximum(
        _masked_std(np.broadcast_to(pos_sum[:, None, None], (p, h, w)), valid, counts),
        SIGMA_FLOOR,
    )

    k_rgb = -rgb_sq / (params.w1 * sigma_rgb**2)
    k_pos = -pos_sq[:, None, None] / (params.w2 * sigma_pos**2)
    weights = (_masked_softmax(k_rgb, valid) + params.omega3 * _masked_softmax(k_pos, valid)) / (
        1.0 + params.omega3
    )
    weights = np.where(valid, weights, 0.0)
    return AffinityKernel(offsets=offsets, weights=weights, valid=valid)


def propagate(mask_probs: np.ndarray, kernel: AffinityKernel, iterations: int) -> np.ndarray:
    """Iterate P <- sum_nbr kernel * P(nbr) per class, renormalizing per pixel."""
    probs = np.asarray(mask_probs, dtype=np.float64)
    for _ in range(iterations):
        nxt = np.zeros_like(probs)
        for idx, (dy, dx) in enumerate(kernel.offsets):
            shifted, _ = _gather(probs, dy, dx)
            nxt += kernel.weights[idx] * shifted
        probs = nxt / np.maximum(nxt.sum(axis=0, keepdims=True), 1e-12)
    return probs


def par_refine(mask: PseudoLabelMask, image, params: ParParams) -> PseudoLabelMask:
    """Align a pseudo-label mask with image structure; detached (no gradients)."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.shape[-2:] != mask.probs.shape[-2:]:
        raise ShapeError(
            f"image spatial {img.shape[-2:]} does not match mask {mask.probs.shape[-2:]}"
        )
    kernel = affinity_kernel(img, params)
    return PseudoLabelMask(propagate(mask.probs, kernel, params.iterations))
