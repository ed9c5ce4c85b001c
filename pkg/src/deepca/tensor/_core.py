"""Dense tensors with a reverse-mode tape.

Every :class:`Function` records its inputs when any of them requires a
gradient.  Backward rules are written with tensor operations, so running them
with recording enabled yields a differentiable gradient (double backward).
Functions whose rules fall back to raw numpy set ``second_order = False``.
"""
from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

_FLOATS = (np.float32, np.float64)


class _Mode(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.strict = False
        self.dtype = np.dtype(np.float32)


_mode = _Mode()
_seq = itertools.count()


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


@contextmanager
def set_grad_enabled(flag: bool):
    prev = _mode.grad_enabled
    _mode.grad_enabled = bool(flag)
    try:
        yield
    finally:
        _mode.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


@contextmanager
def strict_mode(flag: bool = True):
    """Reject non-finite inputs to every primitive while active."""
    prev = _mode.strict
    _mode.strict = bool(flag)
    try:
        yield
    finally:
        _mode.strict = prev


def get_default_dtype() -> np.dtype:
    return _mode.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype.type not in _FLOATS:
        raise TypeError(f"default dtype must be float32 or float64, got {dtype}")
    _mode.dtype = dtype


@contextmanager
def default_dtype(dtype):
    prev = _mode.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _mode.dtype = prev


class Tensor:
    """N-d float array that can take part in the differentiation tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(get_default_dtype() if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Function | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, accumulate: bool = False) -> None:
        backward(self, accumulate=accumulate)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators (implemented in ops, bound below) -----------------------
    def _const(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        from . import ops
        return ops.add(self, self._const(other))

    def __radd__(self, other):
        from . import ops
        return ops.add(self._const(other), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, self._const(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(self._const(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, self._const(other))

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self._const(other), self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, self._const(other))

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(self._const(other), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, self._const(other))

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)

    def sqrt(self):
        from . import ops
        return ops.sqrt(self)

    def abs(self):
        from . import ops
        return ops.abs(self)

    def tanh(self):
        from . import ops
        return ops.tanh(self)


class Function:
    """One primitive on the tape.

    Subclasses implement ``forward(*arrays)`` on raw numpy arrays and
    ``backward(grad, needs)`` returning one gradient tensor (or ``None``) per
    input.  ``self.inputs`` holds the input tensors during backward.
    """

    name = "function"
    second_order = True

    def __init__(self, **attrs):
        self.attrs = attrs
        for key, value in attrs.items():
            setattr(self, key, value)
        self.inputs: tuple[Tensor, ...] = ()
        self.seq = -1
        self.output = None

    @classmethod
    def apply(cls, *inputs: Tensor, **attrs) -> Tensor:
        fn = cls(**attrs)
        arrays = [t.data for t in inputs]
        if _mode.strict:
            for arr in arrays:
                if not np.all(np.isfinite(arr)):
                    raise FloatingPointError(f"{cls.name}: non-finite input in strict mode")
        out = fn.forward(*arrays)
        track = _mode.grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=track, dtype=out.dtype)
        if track:
            # inputs that need no gradient now are recorded as constants
            fn.inputs = tuple(t if t.requires_grad else Tensor(t.data, dtype=t.dtype) for t in inputs)
            fn.seq = next(_seq)
            fn.output = weakref.ref(result)
            result._node = fn
        return result

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor, needs: Sequence[bool]) -> Sequence[Tensor | None]:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"<{self.name} #{self.seq}>"


def _reachable(root: Tensor) -> list[Function]:
    """Nodes reachable from ``root`` in ascending topological order."""
    seen: dict[int, Function] = {}
    stack = [root._node] if root._node is not None else []
    while stack:
        fn = stack.pop()
        if id(fn) in seen:
            continue
        seen[id(fn)] = fn
        for t in fn.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append(t._node)
    return sorted(seen.values(), key=lambda f: f.seq)


def leaves(root: Tensor) -> list[Tensor]:
    """Leaf tensors with ``requires_grad`` that ``root`` depends on, in first-use order."""
    found: dict[int, Tensor] = {}
    if root.is_leaf and root.requires_grad:
        found[id(root)] = root
    for fn in _reachable(root):
        for t in fn.inputs:
            if t.is_leaf and t.requires_grad:
                found.setdefault(id(t), t)
    return list(found.values())


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor | None]:
    """Gradients of ``output`` with respect to ``inputs``.

    Only the part of the tape connecting ``inputs`` to ``output`` is
    traversed.  With ``create_graph`` the returned tensors are themselves on
    the tape; every traversed node must then support second order.
    Unreached inputs give ``None``.
    """
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"grad needs a scalar output or an explicit grad_output, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape, dtype=output.dtype))
    targets = {id(t) for t in inputs}
    nodes = _reachable(output)

    # forward sweep: which nodes depend on a target, and through which inputs
    relevant: dict[int, tuple[bool, ...]] = {}
    for fn in nodes:
        needs = tuple(
            id(t) in targets or (t._node is not None and id(t._node) in relevant)
            for t in fn.inputs
        )
        if any(needs):
            relevant[id(fn)] = needs
    if create_graph:
        for fn in nodes:
            if id(fn) in relevant and not fn.second_order:
                raise RuntimeError(
                    f"op '{fn.name}' does not support second-order differentiation"
                )

    grads: dict[int, Tensor] = {id(output): grad_output}
    results: dict[int, Tensor] = {}
    if id(output) in targets:
        results[id(output)] = grad_output
    with set_grad_enabled(create_graph):
        for fn in reversed(nodes):
            needs = relevant.get(id(fn))
            if needs is None:
                continue
            out = fn.output()
            g = grads.pop(id(out), None) if out is not None else None
            if g is None:
                continue
            in_grads = fn.backward(g, needs)
            for t, need, ig in zip(fn.inputs, needs, in_grads):
                if not need or ig is None:
                    continue
                if ig.shape != t.shape:
                    raise RuntimeError(f"{fn.name}: gradient shape {ig.shape} != input shape {t.shape}")
                key = id(t)
                prev = grads.get(key)
                grads[key] = ig if prev is None else _accumulate(prev, ig, create_graph)
                if key in targets:
                    results[key] = grads[key]
    return [results.get(id(t)) for t in inputs]


def _accumulate(a: Tensor, b: Tensor, create_graph: bool) -> Tensor:
    if create_graph:
        return a + b
    return Tensor(a.data + b.data, dtype=a.dtype)


def backward(
    loss: Tensor,
    params: Iterable[Tensor] | None = None,
    accumulate: bool = False,
) -> None:
    """Populate ``.grad`` (numpy arrays) of leaf tensors from a scalar loss.

    With ``params`` given only those leaves receive gradients; any that the
    loss does not reach get zeros.  Without it, every reachable leaf that
    requires a gradient is filled.  Calling again while gradients are still
    set raises unless ``accumulate`` is true.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
    params = leaves(loss) if params is None else list(params)
    if not accumulate:
        stale = [p for p in params if p.grad is not None]
        if stale:
            raise RuntimeError(
                "gradients already populated; reset them (zero_grad) or pass accumulate=True"
            )
    gs = grad(loss, params)
    for p, g in zip(params, gs):
        value = np.zeros_like(p.data) if g is None else g.data.astype(p.dtype, copy=False)
        if accumulate and p.grad is not None:
            p.grad = p.grad + value
        else:
            p.grad = np.array(value, copy=True)


def backward_as_graph(scalar: Tensor, wrt: Tensor) -> Tensor:
    """Gradient of ``scalar`` w.r.t. ``wrt`` that can itself be differentiated."""
    if scalar.size != 1:
        raise ValueError(f"backward_as_graph needs a scalar, got shape {scalar.shape}")
    (g,) = grad(scalar, [wrt], create_graph=True)
    if g is None:
        g = Tensor(np.zeros_like(wrt.data))
    return g


class ComputationGraph:
    """Snapshot of the tape behind one tensor, in topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _reachable(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def order(self) -> dict[Function, int]:
        return {fn: i for i, fn in enumerate(self.nodes)}

    def replay(self) -> bool:
        """Re-run every node on its recorded inputs; True when all outputs match bit for bit."""
        for fn in self.nodes:
            out = fn.output()
            if out is None:
                continue
            again = type(fn)(**fn.attrs).forward(*[t.data for t in fn.inputs])
            if again.shape != out.shape or not np.array_equal(again, out.data):
                return False
        return True
