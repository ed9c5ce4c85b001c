"""Primitive operations.

Elementwise binary ops broadcast numpy-style; the backward pass folds the
gradient back to each operand's shape with :func:`sum_to`.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special

from ._core import Function, Tensor


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- broadcasting


class SumTo(Function):
    name = "sum_to"

    def forward(self, x):
        self.in_shape = x.shape
        shape = self.shape
        lead = x.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
        )
        out = x.sum(axis=axes, keepdims=True) if axes else x
        return np.ascontiguousarray(out.reshape(shape))

    def backward(self, g, needs):
        return (broadcast_to(g, self.inputs[0].shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    def forward(self, x):
        return np.ascontiguousarray(np.broadcast_to(x, self.shape))

    def backward(self, g, needs):
        return (sum_to(g, self.inputs[0].shape),)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


# ---------------------------------------------------------------- arithmetic


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a + b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a - b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a * b

    def backward(self, g, needs):
        a, b = self.inputs
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        return a / b

    def backward(self, g, needs):
        a, b = self.inputs
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, g, needs):
        return (neg(g),)


class Power(Function):
    name = "power"

    def forward(self, x):
        return np.power(x, x.dtype.type(self.exponent))

    def backward(self, g, needs):
        (x,) = self.inputs
        p = self.exponent
        if p == 1:
            return (g,)
        return (mul(g, mul(power(x, p - 1), _as_tensor(p, x))),)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def neg(x):
    return Neg.apply(x)


def power(x: Tensor, exponent: float) -> Tensor:
    return Power.apply(x, exponent=float(exponent))


# ---------------------------------------------------------------- unary maths


class Exp(Function):
    name = "exp"

    def forward(self, x):
        return np.exp(x)

    def backward(self, g, needs):
        return (mul(g, exp(self.inputs[0])),)


class Log(Function):
    name = "log"

    def forward(self, x):
        return np.log(x)

    def backward(self, g, needs):
        return (div(g, self.inputs[0]),)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        return np.sqrt(x)

    def backward(self, g, needs):
        (x,) = self.inputs
        return (mul(div(g, sqrt(x)), _as_tensor(0.5, x)),)


class Abs(Function):
    name = "abs"

    def forward(self, x):
        return np.abs(x)

    def backward(self, g, needs):
        (x,) = self.inputs
        return (mul(g, Tensor(np.sign(x.data))),)


class Tanh(Function):
    name = "tanh"

    def forward(self, x):
        return np.tanh(x)

    def backward(self, g, needs):
        t = tanh(self.inputs[0])
        return (mul(g, sub(_as_tensor(1.0, t), mul(t, t))),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        return special.expit(x)

    def backward(self, g, needs):
        s = sigmoid(self.inputs[0])
        return (mul(g, mul(s, sub(_as_tensor(1.0, s), s))),)


class Erf(Function):
    name = "erf"

    def forward(self, x):
        return special.erf(x)

    def backward(self, g, needs):
        (x,) = self.inputs
        scale = _as_tensor(2.0 / math.sqrt(math.pi), x)
        return (mul(g, mul(scale, exp(neg(mul(x, x))))),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, g, needs):
        (x,) = self.inputs
        return (mul(g, Tensor((x.data > 0).astype(x.dtype))),)


class LeakyRelu(Function):
    name = "leaky_relu"

    def forward(self, x):
        return np.where(x > 0, x, x * x.dtype.type(self.slope))

    def backward(self, g, needs):
        (x,) = self.inputs
        slope = np.where(x.data > 0, 1.0, self.slope).astype(x.dtype)
        return (mul(g, Tensor(slope)),)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def abs(x):  # noqa: A001
    return Abs.apply(x)


def tanh(x):
    return Tanh.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def erf(x):
    return Erf.apply(x)


def relu(x):
    return Relu.apply(x)


def leaky_relu(x, slope: float = 0.2):
    return LeakyRelu.apply(x, slope=float(slope))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU, composed from primitives."""
    inner = erf(mul(x, _as_tensor(1.0 / math.sqrt(2.0), x)))
    return mul(mul(x, _as_tensor(0.5, x)), add(inner, _as_tensor(1.0, x)))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    name = "sum"

    def forward(self, x):
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g, needs):
        (x,) = self.inputs
        if not self.keepdims:
            shape = list(x.shape)
            for a in self.axis:
                shape[a] = 1
            g = reshape(g, tuple(shape))
        return (broadcast_to(g, x.shape),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=_norm_axes(axis, x.ndim), keepdims=bool(keepdims))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), _as_tensor(1.0 / count, x))


class L2Norm(Function):
    name = "l2_norm"

    def forward(self, x):
        return np.sqrt(np.sum(x * x, axis=self.axis, keepdims=self.keepdims))

    def backward(self, g, needs):
        (x,) = self.inputs
        n = l2_norm(x, axis=self.axis, keepdims=True)
        if not self.keepdims:
            g = reshape(g, n.shape)
        # the subgradient at a zero vector is taken as zero
        n = add(n, Tensor((n.data == 0).astype(n.dtype)))
        return (mul(x, broadcast_to(div(g, n), x.shape)),)


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return L2Norm.apply(x, axis=_norm_axes(axis, x.ndim), keepdims=bool(keepdims))


# ---------------------------------------------------------------- shape ops


class Reshape(Function):
    name = "reshape"

    def forward(self, x):
        try:
            return x.reshape(self.shape)
        except ValueError:
            raise ValueError(f"reshape: cannot reshape {x.shape} into {self.shape}") from None

    def backward(self, g, needs):
        return (reshape(g, self.inputs[0].shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x):
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, g, needs):
        return (transpose(g, tuple(np.argsort(self.axes))),)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return Reshape.apply(x, shape=shape)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    if axes == tuple(range(x.ndim)):
        return x
    return Transpose.apply(x, axes=axes)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _check_basic_index(index):
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (isinstance(item, (slice, int, np.integer)) or item is Ellipsis or item is None):
            raise TypeError("tensor indexing supports slices and integers only; use gather for fancy indexing")
    return index


class GetItem(Function):
    name = "getitem"

    def forward(self, x):
        return np.ascontiguousarray(x[self.index])

    def backward(self, g, needs):
        return (SliceAdjoint.apply(g, index=self.index, shape=self.inputs[0].shape),)


class SliceAdjoint(Function):
    """Place ``x`` at ``index`` of a zero array of ``shape`` (adjoint of basic slicing)."""

    name = "slice_adjoint"

    def forward(self, x):
        out = np.zeros(self.shape, dtype=x.dtype)
        out[self.index] = x
        return out

    def backward(self, g, needs):
        return (GetItem.apply(g, index=self.index),)


def getitem(x: Tensor, index) -> Tensor:
    return GetItem.apply(x, index=_check_basic_index(index))


def pad(x: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim:
        raise ValueError(f"pad: need {x.ndim} width pairs, got {len(widths)}")
    if all(w == (0, 0) for w in widths):
        return x
    shape = tuple(n + a + b for n, (a, b) in zip(x.shape, widths))
    index = tuple(slice(a, a + n) for n, (a, _) in zip(x.shape, widths))
    return SliceAdjoint.apply(x, index=index, shape=shape)


class Concat(Function):
    name = "concat"

    def forward(self, *xs):
        ref = xs[0]
        for x in xs[1:]:
            if x.ndim != ref.ndim or any(
                a != b for i, (a, b) in enumerate(zip(x.shape, ref.shape)) if i != self.axis
            ):
                raise ValueError(f"concat: shapes {ref.shape} and {x.shape} differ off axis {self.axis}")
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g, needs):
        grads = []
        start = 0
        for t, need in zip(self.inputs, needs):
            stop = start + t.shape[self.axis]
            if need:
                index = [slice(None)] * g.ndim
                index[self.axis] = slice(start, stop)
                grads.append(GetItem.apply(g, index=tuple(index)))
            else:
                grads.append(None)
            start = stop
        return grads


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------- matmul


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, g, needs):
        a, b = self.inputs
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


# ---------------------------------------------------------------- gather / scatter


class Gather(Function):
    """``out.flat[i] = x.flat[flat[i]]`` for a fixed integer index array."""

    name = "gather"

    def forward(self, x):
        return x.reshape(-1)[self.flat]

    def backward(self, g, needs):
        return (Scatter.apply(g, flat=self.flat, shape=self.inputs[0].shape),)


class Scatter(Function):
    """Adjoint of :class:`Gather`: sums values into a zero array of ``shape``."""

    name = "scatter"

    def forward(self, x):
        size = int(np.prod(self.shape))
        out = np.bincount(self.flat.reshape(-1), weights=x.reshape(-1), minlength=size)
        return out.astype(x.dtype, copy=False).reshape(self.shape)

    def backward(self, g, needs):
        return (Gather.apply(g, flat=self.flat),)


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick entries along the last axis: ``out[..., p] = x[..., index[..., p]]``.

    ``index`` broadcasts against the leading axes of ``x``.
    """
    index = np.asarray(index)
    lead = x.shape[:-1]
    size = x.shape[-1]
    if np.any(index < 0) or np.any(index >= size):
        raise IndexError(f"gather_last: index out of range for last axis of size {size}")
    out_shape = np.broadcast_shapes(lead, index.shape[:-1]) + index.shape[-1:]
    if out_shape[:-1] != lead:
        raise ValueError(f"gather_last: index shape {index.shape} incompatible with {x.shape}")
    rows = np.arange(int(np.prod(lead)), dtype=np.int64).reshape(lead + (1,)) * size
    flat = rows + np.broadcast_to(index, out_shape).astype(np.int64)
    return Gather.apply(x, flat=flat)


# ---------------------------------------------------------------- normalisation / softmax


class Normalize(Function):
    """Zero-mean, unit-variance over ``axes`` (biased variance, epsilon inside the root)."""

    name = "normalize"
    second_order = False

    def forward(self, x):
        mu = x.mean(axis=self.axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=self.axes, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        self.xhat = xc * self.rstd
        return self.xhat

    def backward(self, g, needs):
        gd = g.data
        xhat = self.xhat
        gm = gd.mean(axis=self.axes, keepdims=True)
        gxm = (gd * xhat).mean(axis=self.axes, keepdims=True)
        return (Tensor(self.rstd * (gd - gm - xhat * gxm)),)


class Softmax(Function):
    name = "softmax"
    second_order = False

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, g, needs):
        y = self.y
        gd = g.data
        return (Tensor(y * (gd - (gd * y).sum(axis=-1, keepdims=True))),)


def normalize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    return Normalize.apply(x, axes=_norm_axes(axes, x.ndim), eps=float(eps))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    return Softmax.apply(x)
