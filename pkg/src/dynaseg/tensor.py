"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable values: every operation returns a fresh tensor and
verifies the result is finite (NaN/Inf never propagates silently). When a
tape is active (see `new_tape`), operations involving gradient-relevant
inputs are recorded in execution order; `backward` replays the records in
exact reverse order and returns gradients for the `requires_grad` leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class TensorError(Exception):
    """Base class for tensor-layer failures."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


# (input tensor, vector-Jacobian product for that input)
_Pair = tuple["Tensor", Callable[[np.ndarray], np.ndarray]]


class GradTape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[_Pair, ...]]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)


_ACTIVE_TAPE: GradTape | None = None


@contextlib.contextmanager
def new_tape():
    """Activate a fresh gradient tape for the enclosed computation."""
    global _ACTIVE_TAPE
    tape = GradTape()
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE


class Tensor:
    """Immutable dense n-d array of float64, optionally on the active tape."""

    __slots__ = ("data", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created from non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def to_numpy(self) -> np.ndarray:
        """Writable copy of the underlying values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return _fresh(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def relu(self) -> "Tensor":
        return relu(self)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


def _fresh(arr: np.ndarray) -> Tensor:
    """Wrap an op-owned array without copying; still enforces finiteness."""
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.ndim > 0 and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced non-finite values")
    out = object.__new__(Tensor)
    arr.flags.writeable = False
    out.data = arr
    out.requires_grad = False
    out.tape = None
    return out


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def _emit(out_data: np.ndarray, pairs: Sequence[_Pair]) -> Tensor:
    out = _fresh(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and not tape._consumed:
        live = tuple(
            (t, vjp) for t, vjp in pairs if t.requires_grad or t.tape is tape
        )
        if live:
            out.tape = tape
            tape._records.append((out, live))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data + float(b), [(a, lambda g: g)])
    _check_broadcast(a, b, "add")
    return _emit(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data - float(b), [(a, lambda g: g)])
    _check_broadcast(a, b, "sub")
    return _emit(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit(a.data * s, [(a, lambda g: g * s)])
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        [
            (a, lambda g: _unbroadcast(g * bd, a.shape)),
            (b, lambda g: _unbroadcast(g * ad, b.shape)),
        ],
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit(a.data / s, [(a, lambda g: g / s)])
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return _emit(
        ad / bd,
        [
            (a, lambda g: _unbroadcast(g / bd, a.shape)),
            (b, lambda g: _unbroadcast(-g * ad / (bd * bd), b.shape)),
        ],
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, [(a, lambda g: -g)])


def scale(a: Tensor, s: float) -> Tensor:
    return mul(a, float(s))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), [(a, lambda g: g / ad)])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, [(a, lambda g: g * out)])


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, [(a, lambda g: g * 0.5 / out)])


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data
    return _emit(
        ad @ bd,
        [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)],
    )


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axis}")
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
    return axes


def _restore_dims(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _emit(out, [(x, lambda g: _restore_dims(g, shape, axes, keepdims).copy())])


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    count = 1
    for a in axes:
        count *= shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _emit(
        out, [(x, lambda g: _restore_dims(g, shape, axes, keepdims).copy() / count)]
    )


# -- structure ---------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _emit(out, [(x, lambda g: g.reshape(old))])


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), [(x, lambda g: g.transpose(inverse))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    pairs = []
    start = 0
    for t in tensors:
        n = t.shape[axis]
        sl = [slice(None)] * t.ndim
        sl[axis] = slice(start, start + n)
        pairs.append((t, (lambda s: (lambda g: g[tuple(s)].copy()))(tuple(sl))))
        start += n
    return _emit(out, pairs)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros(shape, dtype=DTYPE)
        full[sl] = g
        return full

    return _emit(x.data[sl].copy(), [(x, vjp)])


# -- normalizations ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax along `axis` (max-subtraction before exponentiation)."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _emit(out, [(x, vjp)])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm scale/shift must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gy = g * gd
        return inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )

    return _emit(
        out,
        [
            (x, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=lead)),
            (beta, lambda g: g.sum(axis=lead)),
        ],
    )


def top2_margin(p: Tensor, axis: int = 0) -> Tensor:
    """Difference between the largest and second-largest entries along `axis`.

    Ties are broken toward the lexicographically-first index; the gradient
    flows only through the two selected entries.
    """
    axis = axis % p.ndim
    if p.shape[axis] < 2:
        raise ShapeError(f"top2_margin needs at least 2 entries along axis {axis}")
    pd = np.moveaxis(p.data, axis, 0)
    i1 = np.argmax(pd, axis=0)
    p1 = np.take_along_axis(pd, i1[None], axis=0)[0]
    masked = pd.copy()
    np.put_along_axis(masked, i1[None], -np.inf, axis=0)
    i2 = np.argmax(masked, axis=0)
    p2 = np.take_along_axis(pd, i2[None], axis=0)[0]

    def vjp(g: np.ndarray) -> np.ndarray:
        z = np.zeros_like(pd)
        np.put_along_axis(z, i1[None], g[None], axis=0)
        np.put_along_axis(z, i2[None], -g[None], axis=0)
        return np.moveaxis(z, 0, axis)

    return _emit(p1 - p2, [(p, vjp)])


# -- reverse pass ------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar loss for every participating requires_grad leaf.

    Consumes the tape the loss was recorded on.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TensorError("loss was not recorded on an active tape")
    if tape._consumed:
        raise TensorError("gradient tape already consumed")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, pairs in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, vjp in pairs:
            contrib = vjp(g)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
            if inp.requires_grad and inp.tape is None:
                leaves[key] = inp
    return {t: _fresh(np.asarray(grads[k], dtype=DTYPE).reshape(t.shape)) for k, t in leaves.items()}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per element: |analytic - numeric| / max(1, |numeric|).
    """
    with new_tape():
        leaf = Tensor(x.data, requires_grad=True)
        out = f(leaf)
        if out.size != 1:
            raise ShapeError("grad_check target must return a scalar")
        grads = backward(out)
    analytic = grads[leaf].data if leaf in grads else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=DTYPE)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(x.shape))).item()
        fm = f(Tensor(minus.reshape(x.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
