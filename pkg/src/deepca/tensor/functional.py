"""Volumetric layers on top of the primitives: convolution, pooling, resampling."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from ._core import Function, Tensor

# The three convolution kernels below are the partial derivatives of one
# trilinear form  T(x, w, g) = sum g[n,f,o] * pad(x)[n,c,s*o+k] * w[f,c,k].
# Each one's backward is expressed with the other two, which closes the
# family under repeated differentiation.


def _windows(xp: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    return win[:, :, : out_dims[0], : out_dims[1], : out_dims[2]]


def _pad3(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv_out_dims(in_dims, kernel: int, stride: int, padding: int) -> tuple[int, ...]:
    return tuple((n + 2 * padding - kernel) // stride + 1 for n in in_dims)


def _conv_np(x, w, stride, padding):
    k = w.shape[2]
    out_dims = conv_out_dims(x.shape[2:], k, stride, padding)
    win = _windows(_pad3(x, padding), k, stride, out_dims)
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def _conv_weight_np(x, g, k, stride, padding):
    win = _windows(_pad3(x, padding), k, stride, g.shape[2:])
    gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return np.ascontiguousarray(gw)


def _conv_input_np(g, w, x_shape, stride, padding):
    n, c = x_shape[:2]
    k = w.shape[2]
    dims = tuple(s + 2 * padding for s in x_shape[2:])
    out = np.zeros((n, c) + dims, dtype=g.dtype)
    # (N, Do, Ho, Wo, C, k, k, k)
    cols = np.tensordot(g, w, axes=([1], [0]))
    cols = np.moveaxis(cols, 4, 1)
    do, ho, wo = g.shape[2:]
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out[
                    :, :,
                    i : i + stride * (do - 1) + 1 : stride,
                    j : j + stride * (ho - 1) + 1 : stride,
                    l : l + stride * (wo - 1) + 1 : stride,
                ] += cols[..., i, j, l]
    if padding:
        p = padding
        out = out[:, :, p:-p, p:-p, p:-p]
    return np.ascontiguousarray(out)


class Conv3d(Function):
    name = "conv3d"

    def forward(self, x, w):
        return _conv_np(x, w, self.stride, self.padding)

    def backward(self, g, needs):
        x, w = self.inputs
        gx = ConvInput.apply(w, g, x_shape=x.shape, stride=self.stride, padding=self.padding) if needs[0] else None
        gw = ConvWeight.apply(x, g, kernel=w.shape[2], stride=self.stride, padding=self.padding) if needs[1] else None
        return gx, gw


class ConvInput(Function):
    name = "conv3d_input_grad"

    def forward(self, w, g):
        return _conv_input_np(g, w, self.x_shape, self.stride, self.padding)

    def backward(self, h, needs):
        w, g = self.inputs
        gw = ConvWeight.apply(h, g, kernel=w.shape[2], stride=self.stride, padding=self.padding) if needs[0] else None
        gg = Conv3d.apply(h, w, stride=self.stride, padding=self.padding) if needs[1] else None
        return gw, gg


class ConvWeight(Function):
    name = "conv3d_weight_grad"

    def forward(self, x, g):
        return _conv_weight_np(x, g, self.kernel, self.stride, self.padding)

    def backward(self, h, needs):
        x, g = self.inputs
        gx = ConvInput.apply(h, g, x_shape=x.shape, stride=self.stride, padding=self.padding) if needs[0] else None
        gg = Conv3d.apply(x, h, stride=self.stride, padding=self.padding) if needs[1] else None
        return gx, gg


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation. ``x``: N x C x D x H x W, ``weight``: F x C x k x k x k."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv3d: stride must be >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d: expected 5-d input and weight, got {x.shape} and {weight.shape}")
    k = weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k < 1:
        raise ValueError(f"conv3d: kernel must be cubic, got {weight.shape[2:]}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d: input channels {x.shape[1]} != weight in-channels {weight.shape[1]}")
    if any(n + 2 * padding < k for n in x.shape[2:]):
        raise ValueError(f"conv3d: kernel {k} larger than padded input {x.shape[2:]} (padding {padding})")
    y = Conv3d.apply(x, weight, stride=int(stride), padding=int(padding))
    if bias is not None:
        y = y + ops.reshape(bias, (1, bias.shape[0], 1, 1, 1))
    return y


# ---------------------------------------------------------------- pooling / resampling


class MaxPool3d(Function):
    name = "max_pool3d"
    second_order = False

    def forward(self, x):
        n, c, d, h, w = x.shape
        f = self.factor
        blocks = x.reshape(n, c, d // f, f, h // f, f, w // f, f)
        blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // f, h // f, w // f, f ** 3)
        self.arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g, needs):
        n, c, d, h, w = self.inputs[0].shape
        f = self.factor
        blocks = np.zeros(g.shape + (f ** 3,), dtype=g.dtype)
        np.put_along_axis(blocks, self.arg[..., None], g.data[..., None], axis=-1)
        blocks = blocks.reshape(n, c, d // f, h // f, w // f, f, f, f).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (Tensor(blocks.reshape(n, c, d, h, w)),)


class Upsample(Function):
    """Nearest-neighbour upsampling by an integer factor on the three spatial axes."""

    name = "upsample_nearest3d"

    def forward(self, x):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)

    def backward(self, g, needs):
        return (SumPool.apply(g, factor=self.factor),)


class SumPool(Function):
    name = "sum_pool3d"

    def forward(self, x):
        n, c, d, h, w = x.shape
        f = self.factor
        return x.reshape(n, c, d // f, f, h // f, f, w // f, f).sum(axis=(3, 5, 7))

    def backward(self, g, needs):
        return (Upsample.apply(g, factor=self.factor),)


def _check_divisible(name, x, factor):
    if x.ndim != 5 or any(n % factor for n in x.shape[2:]):
        raise ValueError(f"{name}: spatial dims {x.shape[2:]} must be divisible by {factor}")


def max_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    _check_divisible("max_pool3d", x, factor)
    return MaxPool3d.apply(x, factor=int(factor))


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    return Upsample.apply(x, factor=int(factor))


def sum_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    _check_divisible("sum_pool3d", x, factor)
    return SumPool.apply(x, factor=int(factor))


# ---------------------------------------------------------------- normalisation / dense


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    y = ops.normalize(x, axes=-1, eps=eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    y = ops.normalize(x, axes=(2, 3, 4), eps=eps)
    shape = (1, x.shape[1], 1, 1, 1)
    if gamma is not None:
        y = y * ops.reshape(gamma, shape)
    if beta is not None:
        y = y + ops.reshape(beta, shape)
    return y


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = ops.matmul(x, weight)
    if bias is not None:
        y = y + bias
    return y


# ---------------------------------------------------------------- trilinear sampling


def grid_sample3d(x: Tensor, coords: Tensor, integer_axes=()) -> Tensor:
    """Trilinear samples of ``x`` (N x C x D x H x W) at ``coords`` (N x P x 3).

    Coordinates are continuous voxel indices (voxel centres at integers);
    samples outside the grid read zero.  Differentiable in both ``x`` and
    ``coords``; the cell index is treated as piecewise constant.

    ``integer_axes`` lists axes whose coordinates are known integers that
    need no gradient; interpolation skips them (bilinear for one axis).
    """
    n, c = x.shape[:2]
    dims = x.shape[2:]
    if coords.ndim != 3 or coords.shape[0] != n or coords.shape[2] != 3:
        raise ValueError(f"grid_sample3d: coords must be N x P x 3 with N={n}, got {coords.shape}")
    for a in integer_axes:
        if np.any(coords.data[..., a] != np.round(coords.data[..., a])):
            raise ValueError(f"grid_sample3d: axis {a} declared integer but has fractional coordinates")
    p = coords.shape[1]
    size = int(np.prod(dims))
    free = [a for a in range(3) if a not in integer_axes]
    m = 2 ** len(free)
    base = np.floor(coords.data)
    lo = np.moveaxis(base.astype(np.int64), 2, 1)  # n, 3, p
    # all corners in one gather (corner-major); out-of-grid corners read an appended zero
    strides = (dims[1] * dims[2], dims[2], 1)
    corner_shape = (n,) + (1,) * len(free) + (p,)
    lin, valid = 0, True
    for a in range(3):
        ia = lo[:, a].reshape(corner_shape)
        if a in free:
            k = free.index(a)
            ia = ia + np.array([0, 1]).reshape((1,) + tuple(2 if j == k else 1 for j in range(len(free))) + (1,))
        lin = lin + ia * strides[a]
        valid = valid & (ia >= 0) & (ia < dims[a])
    lin = np.broadcast_to(np.where(valid, lin, size), (n,) + (2,) * len(free) + (p,)).reshape(n, 1, m * p)
    flat_x = ops.concat([ops.reshape(x, (n, c, size)), Tensor(np.zeros((n, c, 1), dtype=x.dtype))], axis=2)
    sampled = ops.reshape(ops.gather_last(flat_x, lin), (n, c, m, p))
    if not free:
        return ops.reshape(sampled, (n, c, p))
    # separable weights: (1 - f, f) per free axis, outer product over those axes
    frac = ops.transpose(coords - Tensor(base), (0, 2, 1))  # n, 3, p
    pair = ops.concat([ops.reshape(1.0 - frac, (n, 1, 3, p)), ops.reshape(frac, (n, 1, 3, p))], axis=1)
    weight = None
    for k, a in enumerate(free):
        shape = (n,) + tuple(2 if j == k else 1 for j in range(len(free))) + (p,)
        w = ops.reshape(pair[:, :, a], shape)
        weight = w if weight is None else weight * w
    weight = ops.reshape(weight, (n, 1, m, p))
    return ops.sum(sampled * weight, axis=2)
