"""Convolution geometry and kernels against naive-loop and algebraic oracles."""

import numpy as np
import pytest

from dynaseg.conv import (
    ConvGeometry,
    GeometryError,
    bilinear_upsample,
    conv2d,
    depthwise_separable_conv,
    output_size,
)
from dynaseg.tensor import ShapeError, Tensor, grad_check


def naive_conv2d(x: np.ndarray, k: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """Direct six-nested-loop reference convolution."""
    m_out = output_size(g)
    xp = np.pad(x, ((0, 0), (g.padding, g.padding), (g.padding, g.padding)))
    out = np.zeros((k.shape[0], m_out, m_out))
    for o in range(k.shape[0]):
        for i in range(m_out):
            for j in range(m_out):
                acc = 0.0
                for c in range(x.shape[0]):
                    for u in range(g.kernel_size):
                        for v in range(g.kernel_size):
                            acc += k[o, c, u, v] * xp[
                                c, i * g.stride + u * g.dilation, j * g.stride + v * g.dilation
                            ]
                out[o, i, j] = acc
    return out


class TestOutputSize:
    def test_identity_case(self):
        assert output_size(ConvGeometry(1, 0, 1, 1, 1)) == 1

    def test_plain_3x3(self):
        assert output_size(ConvGeometry(64, 0, 3, 1, 1)) == 62

    def test_dilated_padded_preserves_size(self):
        # k' = 13; cross-checked by enumerating valid anchors on the padded axis
        g = ConvGeometry(64, 6, 3, 6, 1)
        assert g.effective_kernel == 13
        anchors = [
            a for a in range(64 + 2 * 6)
            if a + g.effective_kernel <= 64 + 2 * 6
        ]
        assert output_size(g) == len(anchors) == 64

    def test_invalid_geometry_raises(self):
        with pytest.raises(GeometryError):
            output_size(ConvGeometry(4, 0, 3, 6, 1))

    def test_geometry_field_validation(self):
        with pytest.raises(GeometryError):
            ConvGeometry(8, -1, 3, 1, 1)
        with pytest.raises(GeometryError):
            ConvGeometry(8, 0, 3, 0, 1)

    def test_full_sweep_matches_realized_extent(self):
        rng = np.random.default_rng(0)
        checked = 0
        for m in (8, 16, 33, 64):
            for k in (1, 3, 5):
                for r in (1, 2, 3, 6, 12, 18):
                    for s in (1, 2):
                        for p in (0, 1, 2, 6):
                            g = ConvGeometry(m, p, k, r, s)
                            if g.effective_kernel > m + 2 * p:
                                with pytest.raises(GeometryError):
                                    output_size(g)
                                continue
                            x = Tensor(rng.normal(size=(1, m, m)))
                            kern = Tensor(rng.normal(size=(1, 1, k, k)))
                            out = conv2d(x, kern, g)
                            assert out.shape == (1, output_size(g), output_size(g))
                            checked += 1
        assert checked > 100


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 5, 5)))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0] = k[1, 1] = 1.0
        out = conv2d(x, Tensor(k), ConvGeometry(5, 0, 1, 1, 1))
        assert np.allclose(out.data, x.data)

    def test_zero_kernel(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 6, 6)))
        g = ConvGeometry(6, 1, 3, 1, 1)
        out = conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), g)
        assert out.shape == (4, 6, 6)
        assert np.all(out.data == 0.0)

    def test_matches_naive_loop_dilated(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 3, 3)))
        k = Tensor(rng.normal(size=(1, 1, 3, 3)))
        g = ConvGeometry(3, 2, 3, 2, 1)
        assert np.allclose(conv2d(x, k, g).data, naive_conv2d(x.data, k.data, g), atol=1e-12)

    @pytest.mark.parametrize("g", [
        ConvGeometry(6, 0, 3, 1, 1),
        ConvGeometry(6, 2, 3, 2, 1),
        ConvGeometry(8, 1, 3, 1, 2),
        ConvGeometry(7, 3, 3, 3, 2),
    ])
    def test_matches_naive_loop_multichannel(self, g):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, g.input_size, g.input_size)))
        k = Tensor(rng.normal(size=(3, 2, g.kernel_size, g.kernel_size)))
        assert np.allclose(conv2d(x, k, g).data, naive_conv2d(x.data, k.data, g), atol=1e-12)

    def test_shape_mismatch_names_dimensions(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 6, 6)))
        with pytest.raises(ShapeError, match="channels"):
            conv2d(x, Tensor(rng.normal(size=(1, 3, 3, 3))), ConvGeometry(6, 0, 3, 1, 1))
        with pytest.raises(ShapeError, match="input_size"):
            conv2d(x, Tensor(rng.normal(size=(1, 2, 3, 3))), ConvGeometry(7, 0, 3, 1, 1))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        g = ConvGeometry(6, 1, 3, 2, 1)
        x = Tensor(rng.uniform(-2, 2, size=(2, 6, 6)))
        k = Tensor(rng.uniform(-2, 2, size=(3, 2, 3, 3)))
        assert grad_check(lambda t: conv2d(t, k, g).mean(), x) <= 1e-5
        assert grad_check(lambda t: conv2d(x, t, g).mean(), k) <= 1e-5


class TestDepthwiseSeparable:
    def test_identity(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 5, 5)))
        dw = Tensor(np.ones((3, 1, 1)))
        pw = Tensor(np.eye(3))
        out = depthwise_separable_conv(x, dw, pw, ConvGeometry(5, 0, 1, 1, 1))
        assert np.allclose(out.data, x.data)

    def test_zero_pointwise(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 6, 6)))
        dw = Tensor(rng.normal(size=(2, 3, 3)))
        out = depthwise_separable_conv(x, dw, Tensor(np.zeros((4, 2))), ConvGeometry(6, 1, 3, 1, 1))
        assert out.shape == (4, 6, 6)
        assert np.all(out.data == 0.0)

    def test_equals_expanded_kernel_conv(self):
        # K[o, c] = pw[o, c] * dw[c] algebraic expansion, 50 random instances
        rng = np.random.default_rng(9)
        for _ in range(50):
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            r = int(rng.integers(1, 3))
            g = ConvGeometry(6, r, 3, r, 1)
            x = Tensor(rng.normal(size=(c_in, 6, 6)))
            dw = Tensor(rng.normal(size=(c_in, 3, 3)))
            pw = Tensor(rng.normal(size=(c_out, c_in)))
            expanded = Tensor(pw.data[:, :, None, None] * dw.data[None])
            a = depthwise_separable_conv(x, dw, pw, g)
            b = conv2d(x, expanded, g)
            assert np.max(np.abs(a.data - b.data)) <= 1e-10

    def test_gradients(self):
        rng = np.random.default_rng(10)
        g = ConvGeometry(6, 2, 3, 2, 1)
        x = Tensor(rng.uniform(-2, 2, size=(2, 6, 6)))
        dw = Tensor(rng.uniform(-2, 2, size=(2, 3, 3)))
        pw = Tensor(rng.uniform(-2, 2, size=(3, 2)))
        assert grad_check(lambda t: depthwise_separable_conv(t, dw, pw, g).mean(), x) <= 1e-5
        assert grad_check(lambda t: depthwise_separable_conv(x, t, pw, g).mean(), dw) <= 1e-5
        assert grad_check(lambda t: depthwise_separable_conv(x, dw, t, g).mean(), pw) <= 1e-5


class TestBilinearUpsample:
    def test_constant_field(self):
        out = bilinear_upsample(Tensor(np.full((2, 3, 3), 0.7)), 9, 5)
        assert np.allclose(out.data, 0.7)

    def test_same_size_is_identity(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 6, 6)))
        assert np.allclose(bilinear_upsample(x, 6, 6).data, x.data)

    def test_align_corners_false_half_pixel_centers(self):
        # 1-d ramp [0, 1] upsampled x2: border samples clamp, interior interpolates
        x = Tensor(np.array([[[0.0, 1.0]]]))
        out = bilinear_upsample(x, 1, 4)
        assert np.allclose(out.data[0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_gradient(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(-2, 2, size=(2, 4, 5)))
        w = Tensor(rng.normal(size=(2, 9, 7)))
        assert grad_check(lambda t: (bilinear_upsample(t, 9, 7) * w).mean(), x) <= 1e-5
