"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays; the computation graph is held implicitly. Every
tensor produced by an operation while gradient tracking is enabled records
its operands and a local backward rule. ``backward`` on a scalar walks the
reachable graph once in reverse topological order, accumulates gradients
additively into every tensor that requires them, and frees the graph.

Double precision is the default; single precision can be selected through
the ``SPECTRAL_TTA_FLOAT`` environment variable (``float32``/``float64``).
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

LOG_EPS = 1e-8
NORM_EPS = 1e-6
LAYERNORM_EPS = 1e-6

_PRECISION_ENV = "SPECTRAL_TTA_FLOAT"
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype() -> type:
    """Float dtype selected by the SPECTRAL_TTA_FLOAT environment variable."""
    name = os.environ.get(_PRECISION_ENV, "float64").strip().lower()
    if name in ("float64", "double", "f64"):
        return np.float64
    if name in ("float32", "single", "f32"):
        return np.float32
    raise ValueError(f"unsupported value {name!r} for {_PRECISION_ENV}")


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional array, optionally tracked for gradients.

    Leaves are created directly; non-leaves are created by operations and
    carry references to their operands plus a local backward rule.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; records the graph only when tracking is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.dtype == t.data.dtype else g.astype(t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf, then free the graph.

    The loss must be a scalar. Each graph node is visited exactly once, in
    reverse topological order; a tensor used k times receives the sum of its
    k downstream contributions.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for node in topo:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward_rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward_rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward_rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backward_rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward_rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward_rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward_rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _node(out_data, (a, b), backward_rule)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_rule(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward_rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(out_data, (a, b), backward_rule)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward_rule(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(out_data, (a,), backward_rule)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_rule(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward_rule)


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward_rule(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _node(out_data, (a,), backward_rule)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward_rule(g):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accumulate(part, g[tuple(index)])

    return _node(out_data, parts, backward_rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = np.ascontiguousarray(a.data[index])

    def backward_rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _node(out_data, (a,), backward_rule)


def take(a: Tensor, indices) -> Tensor:
    """Select rows along the first axis; duplicate indices add up in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def backward_rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _node(out_data, (a,), backward_rule)


# -- reductions ----------------------------------------------------------------


def _restore_axes(g: np.ndarray, axis, keepdims: bool, shape: tuple) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_rule(g):
        _accumulate(a, _restore_axes(g, axis, keepdims, a.shape))

    return _node(np.asarray(out_data), (a,), backward_rule)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward_rule(g):
        _accumulate(a, _restore_axes(g / count, axis, keepdims, a.shape))

    return _node(np.asarray(out_data), (a,), backward_rule)


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divisor N) over the given axes."""
    centered = sub(a, tensor_mean(a, axis=axis, keepdims=True))
    return tensor_mean(mul(centered, centered), axis=axis, keepdims=keepdims)


# -- elementwise nonlinearities -------------------------------------------------


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward_rule(g):
        # derivative taken as 0 at exactly 0 to keep clamped paths finite
        safe = np.where(a.data > 0.0, out_data, 1.0)
        _accumulate(a, np.where(a.data > 0.0, 0.5 * g / safe, 0.0))

    return _node(out_data, (a,), backward_rule)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward_rule(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward_rule)


def log(a: Tensor) -> Tensor:
    """Natural log with the argument floored at LOG_EPS."""
    a = as_tensor(a)
    floored = np.maximum(a.data, LOG_EPS)
    out_data = np.log(floored)

    def backward_rule(g):
        _accumulate(a, np.where(a.data >= LOG_EPS, g / floored, 0.0))

    return _node(out_data, (a,), backward_rule)


def clamp_min(a: Tensor, minimum: float) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, minimum)

    def backward_rule(g):
        _accumulate(a, np.where(a.data > minimum, g, 0.0))

    return _node(out_data, (a,), backward_rule)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward_rule(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return _node(out_data, (a,), backward_rule)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_rule(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _node(out_data, (a,), backward_rule)


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shift = a.data.max(axis=-1, keepdims=True)
    z = sub(a, shift)
    return sub(z, log(tensor_sum(exp(z), axis=-1, keepdims=True)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward_rule(g):
        reduce_axes = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=reduce_axes))
        if x.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * term)

    return _node(out_data, (x, gamma, beta), backward_rule)


def l2_norm(a: Tensor, keepdims: bool = True) -> Tensor:
    """Euclidean norm over the last axis."""
    return sqrt(tensor_sum(mul(a, a), axis=-1, keepdims=keepdims))
