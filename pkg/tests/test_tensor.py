"""Tensor core: op semantics, tape mechanics, finiteness, grad_check oracle."""

import numpy as np
import pytest

from dynaseg.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    TensorError,
    backward,
    concat,
    grad_check,
    layer_norm,
    narrow,
    new_tape,
    softmax,
    stack,
    top2_margin,
    transpose,
)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestTensorBasics:
    def test_shape_matches_data(self, rng):
        t = Tensor(rng.normal(size=(2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24

    def test_data_is_immutable(self, rng):
        t = Tensor(rng.normal(size=(3, 3)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 1.0

    def test_constructor_copies_input(self):
        src = np.zeros((2, 2))
        t = Tensor(src)
        src[0, 0] = 99.0
        assert t.data[0, 0] == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_ops_refuse_to_produce_non_finite(self):
        x = Tensor([1e308])
        with pytest.raises(NonFiniteError):
            x.exp()
        with pytest.raises(NonFiniteError):
            Tensor([0.0]).log()

    def test_elementwise_shape_mismatch_named(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(4, 5)))
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            a + b


class TestOpSemantics:
    def test_matmul_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 3)))
        assert np.allclose((Tensor(np.eye(4)) @ x).data, x.data)

    def test_matmul_inner_mismatch(self, rng):
        with pytest.raises(ShapeError, match="inner"):
            Tensor(rng.normal(size=(2, 3))) @ Tensor(rng.normal(size=(4, 2)))

    def test_relu_values(self):
        out = Tensor([-1.0, 0.0, 2.0]).relu()
        assert np.allclose(out.data, [0.0, 0.0, 2.0])

    def test_softmax_symmetry(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data, 1 / 3)

    def test_softmax_single_element(self):
        assert np.allclose(softmax(Tensor([7.0]), axis=0).data, [1.0])

    def test_softmax_extreme_values_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0)
        # exp(-1000) underflows to zero; the row still sums to exactly 1
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_softmax_rows_sum_to_one(self, rng):
        for _ in range(50):
            x = Tensor(rng.uniform(-1e3, 1e3, size=(5, 7)))
            sums = softmax(x, axis=1).data.sum(axis=1)
            assert np.max(np.abs(sums - 1.0)) < 1e-9

    def test_reductions(self, rng):
        x = rng.normal(size=(3, 4))
        t = Tensor(x)
        assert t.sum().item() == pytest.approx(x.sum())
        assert t.mean(axis=0).data == pytest.approx(x.mean(axis=0))
        assert t.sum(axis=1, keepdims=True).shape == (3, 1)

    def test_concat_narrow_roundtrip(self, rng):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(4, 3)))
        c = concat([a, b], axis=0)
        assert np.allclose(narrow(c, 0, 0, 2).data, a.data)
        assert np.allclose(narrow(c, 0, 2, 4).data, b.data)

    def test_narrow_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            narrow(Tensor(rng.normal(size=(3, 3))), 0, 2, 2)

    def test_stack(self, rng):
        rows = [Tensor(rng.normal(size=(4,))) for _ in range(3)]
        s = stack(rows, axis=0)
        assert s.shape == (3, 4)
        assert np.allclose(s.data[1], rows[1].data)

    def test_transpose_default_reverses(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)))
        assert transpose(x).shape == (4, 3, 2)

    def test_top2_margin_values(self):
        p = Tensor(np.array([[0.7, 0.5], [0.2, 0.5], [0.1, 0.0]]))
        m = top2_margin(p, axis=0)
        assert np.allclose(m.data, [0.5, 0.0])

    def test_top2_margin_needs_two_entries(self):
        with pytest.raises(ShapeError):
            top2_margin(Tensor(np.ones((1, 4))), axis=0)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        with new_tape():
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            grads = backward(x.sum())
        assert np.allclose(grads[x].data, 1.0)

    def test_half_mean_square_gradient(self, rng):
        vals = rng.normal(size=(5, 2))
        with new_tape():
            x = Tensor(vals, requires_grad=True)
            grads = backward((x * x).mean() * 0.5)
        assert np.allclose(grads[x].data, vals / vals.size)

    def test_non_scalar_loss_rejected(self, rng):
        with new_tape():
            x = Tensor(rng.normal(size=(3,)), requires_grad=True)
            y = x * 2.0
            with pytest.raises(ShapeError):
                backward(y)

    def test_untaped_loss_rejected(self):
        loss = Tensor([1.0]).sum()
        with pytest.raises(TensorError, match="tape"):
            backward(loss)

    def test_tape_consumed_once(self, rng):
        with new_tape():
            x = Tensor(rng.normal(size=(3,)), requires_grad=True)
            loss = x.sum()
            backward(loss)
            with pytest.raises(TensorError, match="consumed"):
                backward(loss)

    def test_shared_input_accumulates(self, rng):
        vals = rng.normal(size=(3,))
        with new_tape():
            x = Tensor(vals, requires_grad=True)
            grads = backward((x + x).sum())
        assert np.allclose(grads[x].data, 2.0)

    def test_reverse_execution_order(self):
        # d/dx of exp(2x) at 0.3 must chain through both records
        with new_tape():
            x = Tensor([0.3], requires_grad=True)
            grads = backward((x * 2.0).exp().sum())
        assert grads[x].data[0] == pytest.approx(2.0 * np.exp(0.6))


class TestGradCheck:
    def test_sum_tiny_error(self, rng):
        err = grad_check(lambda t: t.sum(), Tensor(rng.normal(size=(3, 3))))
        assert err <= 1e-10

    def test_softmax_pick(self, rng):
        x = Tensor(rng.normal(size=(4, 5)))
        err = grad_check(lambda t: narrow(softmax(t, axis=1), 1, 2, 1).sum(), x)
        assert err <= 1e-6

    @pytest.mark.parametrize("shape", [(3, 4), (2, 3, 2)])
    def test_elementwise_chain(self, rng, shape):
        x = Tensor(rng.uniform(-2, 2, size=shape))
        w = Tensor(rng.uniform(-2, 2, size=shape))
        err = grad_check(lambda t: ((t * w + 0.5).relu() * t).mean(), x)
        assert err <= 1e-5

    def test_layer_norm(self, rng):
        g = Tensor(rng.normal(size=(6,)))
        b = Tensor(rng.normal(size=(6,)))
        w = Tensor(rng.normal(size=(4, 6)))
        x = Tensor(rng.uniform(-2, 2, size=(4, 6)))
        assert grad_check(lambda t: (layer_norm(t, g, b) * w).mean(), x) <= 1e-5
        assert grad_check(lambda t: (layer_norm(x, t, b) * w).mean(), g) <= 1e-5

    def test_top2_margin(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(4, 6)))
        err = grad_check(lambda t: top2_margin(softmax(t, axis=0), axis=0).mean(), x)
        assert err <= 1e-5
