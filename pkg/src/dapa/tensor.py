"""Dense tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: every operation that touches a tensor with
``requires_grad`` produces a node holding its parents and a backward closure.
``backward()`` topologically sorts the recorded nodes (the tape) and
propagates adjoints once per node, accumulating into leaf ``grad`` buffers
(add, never overwrite, so a parameter used twice in one pass collects both
contributions).

All arithmetic is done by numpy on the wrapped arrays; float32 is the
training default and float64 is used by the gradient-check suites.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .rng import RngStream

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise UsageError("wrap raw arrays, not Tensors")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result; records the backward rule only when needed."""
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


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


# -- matrix products -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must be >= 2-D, leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(
            f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}"
        ) from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs a >=2-D tensor, got {a.shape}")

    def backward(g):
        _accum(a, g.swapaxes(-1, -2))

    return _node(a.data.swapaxes(-1, -2).copy(), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        _accum(a, g.swapaxes(ax1, ax2))

    return _node(a.data.swapaxes(ax1, ax2).copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape).copy(), (a,), backward)


# -- shape surgery ---------------------------------------------------------


def concat(parts, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; all other dims must agree."""
    parts = list(parts)
    if not parts:
        raise UsageError("concat of zero tensors")
    nd = parts[0].ndim
    ax = axis % nd
    ref = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for d in range(nd):
            if d != ax and p.shape[d] != ref[d]:
                raise DimensionError(
                    f"concat off-axis dims disagree on axis {d}: {tuple(ref)} vs {p.shape}"
                )
    data = np.concatenate([p.data for p in parts], axis=ax)
    extents = [p.shape[ax] for p in parts]

    def backward(g):
        start = 0
        idx = [slice(None)] * nd
        for p, ext in zip(parts, extents):
            if p.requires_grad:
                idx[ax] = slice(start, start + ext)
                _accum(p, g[tuple(idx)])
            start += ext

    return _node(data, parts, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    nd = a.ndim
    ax = axis % nd
    idx = [slice(None)] * nd
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf)

    return _node(a.data[idx].copy(), (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows (axis 0) by integer index; duplicates allowed."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _node(a.data[idx], (a,), backward)


def stack(parts, axis: int = 0) -> Tensor:
    """Stack equal-shaped tensors along a new axis."""
    parts = list(parts)
    if not parts:
        raise UsageError("stack of zero tensors")
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape:
            raise DimensionError(f"stack shape mismatch: {shape} vs {p.shape}")
    data = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        slabs = np.moveaxis(g, axis, 0)
        for p, slab in zip(parts, slabs):
            if p.requires_grad:
                _accum(p, slab)

    return _node(data, parts, backward)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // data.size

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / count, a.data.shape))

    return _node(data, (a,), backward)


# -- nonlinearities ----------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _node(data, (a,), backward)


def unary_map(a: Tensor, kind: str) -> Tensor:
    """Dispatch by name: one of tanh, sigmoid, exp, neg."""
    try:
        fn = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "neg": neg}[kind]
    except KeyError:
        raise ConfigError(f"unknown unary map {kind!r}") from None
    return fn(a)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised with a per-row max shift."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(a, data * (g - inner))

    return _node(data, (a,), backward)


def dropout(a: Tensor, rate: float, rng: RngStream | None, training: bool) -> Tensor:
    """Inverted dropout: scales survivors at train time, identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise UsageError("training-mode dropout needs an RngStream")
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    keep *= np.asarray(1.0 / (1.0 - rate), dtype=a.data.dtype)

    def backward(g):
        _accum(a, g * keep)

    return _node(a.data * keep, (a,), backward)


# -- backward pass -----------------------------------------------------------


def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Propagate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls accumulate into existing grad buffers; callers reset with
    ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad and loss._backward is None:
        return  # constant wrt every leaf
    order = _toposort(loss)
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # free intermediate adjoints; leaves keep theirs


def finite_diff_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None,
                      rng: RngStream | None = None) -> float:
    """Compare analytic gradients of ``f`` at ``x`` against central differences.

    ``f`` maps the tensor to a scalar Tensor and must be deterministic.
    Returns the max relative error over checked coordinates, with the
    relative scale floored at 1e-8. ``max_coords`` subsamples coordinates
    (seeded by ``rng``) to keep large checks affordable.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        picker = rng if rng is not None else RngStream(0)
        coords = picker.permutation(n)[:max_coords]
    else:
        coords = range(n)

    worst = 0.0
    aflat = analytic.reshape(-1)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            scale = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / scale)
    return worst


def as_scalar(value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def sqrt_scale(d: int) -> float:
    """The 1/sqrt(d) attention scale as a plain float."""
    return 1.0 / math.sqrt(d)
