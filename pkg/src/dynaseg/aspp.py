"""ASPP block with an epoch-driven dynamic dilation-rate schedule.

The default schedule keys on epoch mod 10: residues {1,3,5,7} use
[1,1,2,3], {2,4,6} use [1,1,3,5], {8,9} use [1,3,6,9], and residue 0
falls back to the classic DeepLabV3+ rates [1,6,12,18].

The first rate always drives a 1x1 branch; the remaining three drive 3x3
depthwise-separable dilated branches padded with p = r so the spatial
extent is preserved. A global-average-pool branch is concatenated before
the 1x1 fusion.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .conv import ConvGeometry, conv2d, depthwise_separable_conv
from .tensor import ShapeError, Tensor, concat, narrow, relu, reshape, softmax

_DEFAULT_TABLE: dict[int, tuple[int, int, int, int]] = {
    0: (1, 6, 12, 18),
    1: (1, 1, 2, 3),
    2: (1, 1, 3, 5),
    3: (1, 1, 2, 3),
    4: (1, 1, 3, 5),
    5: (1, 1, 2, 3),
    6: (1, 1, 3, 5),
    7: (1, 1, 2, 3),
    8: (1, 3, 6, 9),
    9: (1, 3, 6, 9),
}


@dataclass(frozen=True)
class DilationSchedule:
    """Epoch-residue-indexed table of four dilation rates."""

    table: dict[int, tuple[int, int, int, int]]

    def __post_init__(self):
        if set(self.table) != set(range(10)):
            raise ValueError("schedule table must cover residues 0..9")
        for residue, rates in self.table.items():
            if len(rates) != 4:
                raise ValueError(f"residue {residue} needs exactly four rates, got {rates}")
            if any(r < 1 for r in rates):
                raise ValueError(f"residue {residue} has a rate < 1: {rates}")

    def rates_for(self, epoch: int) -> list[int]:
        if epoch < 1:
            raise ValueError(f"epoch counter starts at 1, got {epoch}")
        return list(self.table[epoch % 10])


DEFAULT_SCHEDULE = DilationSchedule(_DEFAULT_TABLE)


def dilation_schedule(epoch: int, schedule: DilationSchedule = DEFAULT_SCHEDULE) -> list[int]:
    """Four dilation rates for a 1-based epoch counter."""
    return schedule.rates_for(epoch)


@dataclass
class AsppParams:
    """Branch kernels: 1x1 branch, three dilated separable branches, pool branch, fusion."""

    point_pw: Tensor           # (Cb, C)
    dil_dw: tuple[Tensor, ...]  # 3 x (C, 3, 3)
    dil_pw: tuple[Tensor, ...]  # 3 x (Cb, C)
    pool_pw: Tensor            # (Cb, C)
    fuse_w: Tensor             # (C, 5 * Cb)
    fuse_b: Tensor             # (C,)

    def __post_init__(self):
        cb, c = self.point_pw.shape
        widths = {self.point_pw.shape[0], self.pool_pw.shape[0]}
        widths.update(pw.shape[0] for pw in self.dil_pw)
        if len(widths) != 1:
            raise ShapeError(f"branch output channel counts differ: {sorted(widths)}")
        if len(self.dil_dw) != 3 or len(self.dil_pw) != 3:
            raise ShapeError("expected exactly three dilated branches")
        if self.fuse_w.shape != (c, 5 * cb):
            raise ShapeError(
                f"fusion kernel must be ({c}, {5 * cb}), got {self.fuse_w.shape}"
            )
        if self.fuse_b.shape != (c,):
            raise ShapeError(f"fusion bias must be ({c},), got {self.fuse_b.shape}")

    @property
    def channels(self) -> int:
        return self.point_pw.shape[1]

    @property
    def branch_channels(self) -> int:
        return self.point_pw.shape[0]


def init_aspp_params(channels: int, rng: np.random.Generator, noise: float = 0.01) -> AsppParams:
    """Near-identity initialization: the 1x1 branch passes through, fusion selects it."""
    c = channels
    eye = np.eye(c)
    fuse = np.concatenate([eye] + [np.zeros((c, c))] * 4, axis=1)
    return AsppParams(
        point_pw=Tensor(eye + noise * rng.standard_normal((c, c)), requires_grad=True),
        dil_dw=tuple(
            Tensor(noise * rng.standard_normal((c, 3, 3)), requires_grad=True) for _ in range(3)
        ),
        dil_pw=tuple(
            Tensor(noise * rng.standard_normal((c, c)), requires_grad=True) for _ in range(3)
        ),
        pool_pw=Tensor(noise * rng.standard_normal((c, c)), requires_grad=True),
        fuse_w=Tensor(fuse + noise * rng.standard_normal((c, 5 * c)), requires_grad=True),
        fuse_b=Tensor(np.zeros(c), requires_grad=True),
    )


def aspp_forward(feature: Tensor, rates, params: AsppParams) -> Tensor:
    """Five parallel branches concatenated and fused back to the input channel count."""
    if feature.ndim != 3:
        raise ShapeError(f"aspp_forward: feature must be (C, H, W), got {feature.shape}")
    c, h, w = feature.shape
    if h != w:
        raise ShapeError(f"aspp_forward: feature must be square, got {h}x{w}")
    if c != params.channels:
        raise ShapeError(f"aspp_forward: feature has {c} channels, params expect {params.channels}")
    rates = list(rates)
    if len(rates) != 4:
        raise ShapeError(f"aspp_forward: need four dilation rates, got {rates}")
    cb = params.branch_channels

    point_geom = ConvGeometry(h, padding=0, kernel_size=1, dilation=rates[0], stride=1)
    branches = [conv2d(feature, reshape(params.point_pw, (cb, c, 1, 1)), point_geom)]
    for rate, dw, pw in zip(rates[1:], params.dil_dw, params.dil_pw):
        geom = ConvGeometry(h, padding=rate, kernel_size=3, dilation=rate, stride=1)
        branches.append(depthwise_separable_conv(feature, dw, pw, geom))

    pooled = feature.mean(axis=(1, 2)).reshape(c, 1)
    pooled = (params.pool_pw @ pooled).reshape(cb, 1, 1)
    branches.append(pooled * Tensor(np.ones((1, h, w))))

    stacked = concat(branches, axis=0)
    fuse_geom = ConvGeometry(h, padding=0, kernel_size=1, dilation=1, stride=1)
    fused = conv2d(stacked, reshape(params.fuse_w, (c, 5 * cb, 1, 1)), fuse_geom)
    return fused + reshape(params.fuse_b, (c, 1, 1))


def attention_aspp_inject(attn, epoch: int, params: AsppParams,
                          schedule: DilationSchedule = DEFAULT_SCHEDULE):
    """Refine the spatial part of every attention row through ASPP.

    Per head, the N patch-to-patch weights of each query row are reshaped
    to a sqrt(N) x sqrt(N) grid (queries stacked as channels), passed
    through aspp_forward at the epoch's rates, flattened back, relu'd and
    row-softmaxed. The class-token row and column are left untouched; the
    refreshed spatial weights are rescaled by (1 - class-token weight) so
    each full row still sums to 1.
    """
    weights = attn.weights
    heads, n1, _ = weights.shape
    n = n1 - 1
    grid = math.isqrt(n)
    if grid * grid != n:
        raise ShapeError(f"attention grid needs a perfect-square patch count, got {n}")
    rates = dilation_schedule(epoch, schedule)

    refined_heads = []
    for head in range(heads):
        full = reshape(narrow(weights, 0, head, 1), (n1, n1))
        body = narrow(full, 0, 1, n)
        spatial = narrow(body, 1, 1, n)
        cls_col = narrow(body, 1, 0, 1)

        mixed = aspp_forward(reshape(spatial, (n, grid, grid)), rates, params)
        renormed = softmax(relu(reshape(mixed, (n, n))), axis=1)
        scaled = renormed * (1.0 - cls_col)

        top = narrow(full, 0, 0, 1)
        rest = concat([cls_col, scaled], axis=1)
        refined_heads.append(reshape(concat([top, rest], axis=0), (1, n1, n1)))

    return dataclasses.replace(attn, weights=concat(refined_heads, axis=0))
