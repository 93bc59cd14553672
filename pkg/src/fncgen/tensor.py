"""Reverse-mode autodiff on float64 numpy arrays.

Every differentiable operation builds an implicit DAG through parent
pointers; ``backward`` walks it once in reverse topological order and
accumulates gradients into ``requires_grad`` tensors (explicit
``zero_grads`` between uses). Forward results are plain numpy, so
anything computed under ``no_grad()`` is just array math.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# Names of ops with a registered backward rule; the gradcheck suite is
# required to cover every entry.
DIFFERENTIABLE_OPS: set[str] = set()

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-d float64 array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

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
            raise ContractError(f"item() expects a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Graph-cut: same values, no history, no gradient."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    # shape / reductions / elementwise, delegating to module functions

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return variance(self, axis, keepdims)

    def tanh(self):
        return tanh(self)

    def gelu(self):
        return gelu(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def sqrt(self):
        return tsqrt(self)

    def softplus(self):
        return softplus(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _registered(name: str):
    DIFFERENTIABLE_OPS.add(name)

    def deco(fn):
        return fn

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic

@_registered("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), bwd, "add")


@_registered("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(data, (a, b), bwd, "sub")


@_registered("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), bwd, "mul")


@_registered("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * data / b.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), bwd, "div")


@_registered("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


@_registered("tanh")
def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


@_registered("gelu")
def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))

    def bwd(g):
        d_inner = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
        local = 0.5 * ((1.0 + t) + x * ((1.0 - t * t) * d_inner))
        return (g * local,)

    return _result(0.5 * x * (1.0 + t), (a,), bwd, "gelu")


@_registered("exp")
def texp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


@_registered("log")
def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


@_registered("sqrt")
def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _result(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_registered("softplus")
def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _result(data, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


@_registered("clip_min")
def clip_min(a, lo: float) -> Tensor:
    """max(x, lo); no gradient through the clipped region."""
    a = as_tensor(a)
    data = np.maximum(a.data, lo)
    mask = a.data > lo
    return _result(data, (a,), lambda g: (g * mask,), "clip_min")


# ---------------------------------------------------------------------------
# matmul

@_registered("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _result(data, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# shape ops

@_registered("reshape")
def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.data.shape
    return _result(data, (a,), lambda g: (g.reshape(src),), "reshape")


@_registered("transpose")
def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last2(a) -> Tensor:
    """Transpose the trailing two axes, leaving batch axes alone."""
    a = as_tensor(a)
    order = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, order)


@_registered("concat")
def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis) for i in range(len(ts))
        )

    return _result(data, tuple(ts), bwd, "concat")


@_registered("slice")
def tslice(a, key) -> Tensor:
    """Basic indexing/slicing (no advanced index arrays)."""
    a = as_tensor(a)
    data = a.data[key]
    src_shape = a.data.shape

    def bwd(g):
        buf = np.zeros(src_shape)
        buf[key] = g
        return (buf,)

    return _result(data, (a,), bwd, "slice")


@_registered("take_pairs")
def take_pairs(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[..., rows[k], cols[k]] for k in range(len(rows)).

    The (row, col) pairs must be unique; the backward pass scatters
    without accumulation.
    """
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[..., rows, cols]
    src_shape = a.data.shape

    def bwd(g):
        buf = np.zeros(src_shape)
        buf[..., rows, cols] = g
        return (buf,)

    return _result(data, (a,), bwd, "take_pairs")


@_registered("pad")
def pad(a, pad_width) -> Tensor:
    """Zero-pad; pad_width follows numpy's ((before, after), ...) form, one pair per axis."""
    a = as_tensor(a)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    data = np.pad(a.data, pad_width)
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.data.shape))
    return _result(data, (a,), lambda g: (g[key],), "pad")


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_to(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


@_registered("sum")
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.data.shape
    return _result(data, (a,), lambda g: (_expand_to(g, src, axes, keepdims),), "sum")


@_registered("mean")
def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)
    src = a.data.shape
    return _result(data, (a,), lambda g: (_expand_to(g, src, axes, keepdims) / count,), "mean")


@_registered("variance")
def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance over the given axes."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    m = a.data.mean(axis=axes, keepdims=True)
    centered = a.data - m
    data = (centered * centered).mean(axis=axes, keepdims=keepdims)
    src = a.data.shape

    def bwd(g):
        return (_expand_to(g, src, axes, keepdims) * 2.0 * centered / count,)

    return _result(data, (a,), bwd, "variance")


# ---------------------------------------------------------------------------
# softmax / layernorm

@_registered("softmax")
def softmax(a, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _result(s, (a,), bwd, "softmax")


@_registered("layernorm")
def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis: (x - mean)/sqrt(var + eps) * gamma + beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layernorm needs a non-empty last axis")
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    m = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - m
    v = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggamma = gbeta = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            ggamma = _unbroadcast((g * xhat).sum(axis=lead), gamma.data.shape)
        if beta.requires_grad:
            gbeta = _unbroadcast(g.sum(axis=lead), beta.data.shape)
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _result(data, (x, gamma, beta), bwd, "layernorm")


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar loss.

    Repeat calls on the same graph accumulate: each call adds exactly one
    unit of gradient (propagation uses a private buffer per call, so stale
    ``.grad`` values never feed back into the walk).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo = _toposort(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            cur = flowing.get(pid)
            flowing[pid] = pg if cur is None else cur + pg


def _toposort(root: Tensor) -> list[Tensor]:
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return topo


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def one_hot(labels: np.ndarray, num_classes: int) -> Tensor:
    """Constant one-hot matrix [len(labels), num_classes]."""
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return Tensor(out)
