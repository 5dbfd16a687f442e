"""Dilated convolution geometry and the differentiable conv kernels.

The output-extent rule is M = floor((m + 2p - k') / s) + 1 with the
effective kernel k' = k + (k-1)(r-1); a geometry is invalid when k'
exceeds the padded extent m + 2p. Padding is zero-padding throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, TensorError, _emit, matmul, reshape


class GeometryError(TensorError):
    pass


@dataclass(frozen=True)
class ConvGeometry:
    """Square-input convolution geometry: m, p, k, r, s."""

    input_size: int
    padding: int = 0
    kernel_size: int = 1
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.input_size < 1 or self.kernel_size < 1:
            raise GeometryError("input and kernel sizes must be positive")
        if self.dilation < 1 or self.stride < 1:
            raise GeometryError("dilation and stride must be >= 1")
        if self.padding < 0:
            raise GeometryError("padding must be non-negative")

    @property
    def effective_kernel(self) -> int:
        k, r = self.kernel_size, self.dilation
        return k + (k - 1) * (r - 1)

    def check(self) -> None:
        if self.effective_kernel > self.input_size + 2 * self.padding:
            raise GeometryError(
                f"effective kernel {self.effective_kernel} exceeds padded input "
                f"{self.input_size} + 2*{self.padding}"
            )


def output_size(g: ConvGeometry) -> int:
    g.check()
    return (g.input_size + 2 * g.padding - g.effective_kernel) // g.stride + 1


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, r: int, s: int, m_out: int) -> np.ndarray:
    """Strided view (C, k, k, M, M) of dilated kernel taps over the padded input."""
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], k, k, m_out, m_out),
        strides=(s0, s1 * r, s2 * r, s1 * s, s2 * s),
    )


def _scatter_taps(tmp: np.ndarray, padded_shape, k: int, r: int, s: int, m_out: int, p: int, h: int):
    """Accumulate per-tap gradients (C, k, k, M, M) back onto the input grid."""
    gpad = np.zeros(padded_shape, dtype=DTYPE)
    for u in range(k):
        for v in range(k):
            gpad[:, u * r : u * r + s * m_out : s, v * r : v * r + s * m_out : s] += tmp[:, u, v]
    if p == 0:
        return gpad
    return gpad[:, p : p + h, p : p + h].copy()


def _check_spatial(x: Tensor, g: ConvGeometry, op: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{op}: input must be (C, H, W), got {x.shape}")
    _, h, w = x.shape
    if h != w or h != g.input_size:
        raise ShapeError(
            f"{op}: spatial extent {h}x{w} does not match geometry input_size {g.input_size}"
        )


def conv2d(x: Tensor, kernel: Tensor, g: ConvGeometry) -> Tensor:
    """Dilated 2-d convolution: (C_in, m, m) x (C_out, C_in, k, k) -> (C_out, M, M)."""
    _check_spatial(x, g, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv2d: kernel expects {kernel.shape[1]} input channels, input has {x.shape[0]}"
        )
    if kernel.shape[2] != g.kernel_size:
        raise ShapeError(
            f"conv2d: kernel size {kernel.shape[2]} does not match geometry k={g.kernel_size}"
        )
    g.check()
    m_out = output_size(g)
    k, r, s, p = g.kernel_size, g.dilation, g.stride, g.padding
    h = g.input_size

    xp = _pad_spatial(x.data, p)
    cols = _im2col(xp, k, r, s, m_out)
    kd = kernel.data
    out = np.tensordot(kd, cols, axes=([1, 2, 3], [0, 1, 2]))

    def vjp_x(grad: np.ndarray) -> np.ndarray:
        tmp = np.tensordot(kd, grad, axes=([0], [0]))  # (C_in, k, k, M, M)
        return _scatter_taps(tmp, xp.shape, k, r, s, m_out, p, h)

    def vjp_k(grad: np.ndarray) -> np.ndarray:
        return np.tensordot(grad, cols, axes=([1, 2], [3, 4]))

    return _emit(out, [(x, vjp_x), (kernel, vjp_k)])


def depthwise_conv2d(x: Tensor, kernel: Tensor, g: ConvGeometry) -> Tensor:
    """Per-channel dilated convolution: (C, m, m) x (C, k, k) -> (C, M, M)."""
    _check_spatial(x, g, "depthwise_conv2d")
    if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernel must be (C, k, k), got {kernel.shape}")
    if kernel.shape[0] != x.shape[0]:
        raise ShapeError(
            f"depthwise_conv2d: kernel has {kernel.shape[0]} channels, input has {x.shape[0]}"
        )
    if kernel.shape[1] != g.kernel_size:
        raise ShapeError(
            f"depthwise_conv2d: kernel size {kernel.shape[1]} does not match k={g.kernel_size}"
        )
    g.check()
    m_out = output_size(g)
    k, r, s, p = g.kernel_size, g.dilation, g.stride, g.padding
    h = g.input_size

    xp = _pad_spatial(x.data, p)
    cols = _im2col(xp, k, r, s, m_out)
    kd = kernel.data
    out = np.einsum("cuv,cuvij->cij", kd, cols)

    def vjp_x(grad: np.ndarray) -> np.ndarray:
        tmp = np.einsum("cuv,cij->cuvij", kd, grad)
        return _scatter_taps(tmp, xp.shape, k, r, s, m_out, p, h)

    def vjp_k(grad: np.ndarray) -> np.ndarray:
        return np.einsum("cij,cuvij->cuv", grad, cols)

    return _emit(out, [(x, vjp_x), (kernel, vjp_k)])


def depthwise_separable_conv(x: Tensor, dw_kernel: Tensor, pw_kernel: Tensor, g: ConvGeometry) -> Tensor:
    """Per-channel dilated conv followed by 1x1 channel mixing.

    Equivalent to conv2d with the rank-restricted kernel
    K[o, c, :, :] = pw[o, c] * dw[c, :, :].
    """
    if pw_kernel.ndim != 2:
        raise ShapeError(f"pointwise kernel must be (C_out, C), got {pw_kernel.shape}")
    if pw_kernel.shape[1] != x.shape[0]:
        raise ShapeError(
            f"pointwise kernel expects {pw_kernel.shape[1]} channels, input has {x.shape[0]}"
        )
    y = depthwise_conv2d(x, dw_kernel, g)
    c, m1, m2 = y.shape
    mixed = matmul(pw_kernel, reshape(y, (c, m1 * m2)))
    return reshape(mixed, (pw_kernel.shape[0], m1, m2))


def _axis_interp(n_in: int, n_out: int):
    # align-corners-false: source coordinate (i + 0.5) * n_in / n_out - 0.5, clamped
    pos = (np.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, 1.0 - frac, frac


def bilinear_upsample(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Bilinear resize of (C, H, W) to (C, h_out, w_out), align-corners-false."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample: input must be (C, H, W), got {x.shape}")
    if h_out < 1 or w_out < 1:
        raise ShapeError("bilinear_upsample: output extents must be positive")
    c, h_in, w_in = x.shape
    y0, y1, wy0, wy1 = _axis_interp(h_in, h_out)
    x0, x1, wx0, wx1 = _axis_interp(w_in, w_out)

    xd = x.data
    rows = xd[:, y0, :] * wy0[None, :, None] + xd[:, y1, :] * wy1[None, :, None]
    out = rows[:, :, x0] * wx0 + rows[:, :, x1] * wx1

    def vjp(grad: np.ndarray) -> np.ndarray:
        grows = np.zeros((c, h_out, w_in), dtype=DTYPE)
        np.add.at(grows, (slice(None), slice(None), x0), grad * wx0)
        np.add.at(grows, (slice(None), slice(None), x1), grad * wx1)
        gx = np.zeros((c, h_in, w_in), dtype=DTYPE)
        np.add.at(gx, (slice(None), y0, slice(None)), grows * wy0[None, :, None])
        np.add.at(gx, (slice(None), y1, slice(None)), grows * wy1[None, :, None])
        return gx

    return _emit(out, [(x, vjp)])
