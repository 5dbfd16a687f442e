"""Deterministic synthetic scenes: colored shapes on a textured background.

Class 0 is the background; classes 1..C-1 each own a color family drawn
from evenly spaced hues. Shape pixel fraction per image is kept inside
[0.05, 0.6] by resampling the scene, so every image contains usable
foreground without dominating the frame.
"""

from __future__ import annotations

import colorsys

import numpy as np

from .tensor import Tensor

FRACTION_LO = 0.05
FRACTION_HI = 0.6

_BACKGROUND = np.array([0.16, 0.18, 0.26])


def class_color(cls: int, num_classes: int) -> np.ndarray:
    """Saturated, bright color for a foreground class."""
    hue = (cls - 1) / max(num_classes - 1, 1)
    return np.array(colorsys.hsv_to_rgb((hue + 0.02) % 1.0, 0.8, 0.9))


def _paint_disk(img, gt, rng, cls, color, height, width):
    radius = int(rng.integers(max(3, height // 8), max(4, height // 3)))
    cy = int(rng.integers(radius, height - radius))
    cx = int(rng.integers(radius, width - radius))
    yy, xx = np.ogrid[:height, :width]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img[:, mask] = color[:, None]
    gt[mask] = cls


def _paint_rect(img, gt, rng, cls, color, height, width):
    h = int(rng.integers(height // 6, height // 2))
    w = int(rng.integers(width // 6, width // 2))
    y0 = int(rng.integers(0, height - h))
    x0 = int(rng.integers(0, width - w))
    img[:, y0 : y0 + h, x0 : x0 + w] = color[:, None, None]
    gt[y0 : y0 + h, x0 : x0 + w] = cls


def synth_dataset(seed: int, n_images: int = 64, height: int = 32, width: int = 32,
                  num_classes: int = 2) -> list[tuple[Tensor, np.ndarray]]:
    """Seed-deterministic list of (image Tensor (3,H,W) in [0,1], labels (H,W))."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes (background + 1), got {num_classes}")
    if height < 16 or width < 16:
        raise ValueError(f"scene size must be at least 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_images):
        for _attempt in range(64):
            img = np.empty((3, height, width))
            img[:] = _BACKGROUND[:, None, None]
            img += rng.normal(0.0, 0.02, size=img.shape)
            gt = np.zeros((height, width), dtype=np.int64)
            for _shape in range(int(rng.integers(1, 3))):
                cls = int(rng.integers(1, num_classes))
                color = np.clip(class_color(cls, num_classes) + rng.normal(0.0, 0.03, 3), 0, 1)
                if rng.random() < 0.5:
                    _paint_disk(img, gt, rng, cls, color, height, width)
                else:
                    _paint_rect(img, gt, rng, cls, color, height, width)
            img += rng.normal(0.0, 0.01, size=img.shape)
            fraction = float((gt > 0).mean())
            if FRACTION_LO <= fraction <= FRACTION_HI:
                break
        scenes.append((Tensor(np.clip(img, 0.0, 1.0)), gt))
    return scenes
