"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps a row-major float array, an optional gradient buffer of
the same shape, and a backward closure linking it to its parents. Calling
``backward()`` on a scalar result accumulates gradients into every
reachable tensor with ``requires_grad``. Everything is single-threaded and
deterministic: the same seed and inputs produce bitwise-identical results.

Only the operations the denoiser needs are implemented; each op defines
its exact vector-Jacobian product rather than composing from smaller
pieces, which keeps graphs shallow and training fast.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .constants import ATTN_ROW_SUM_TOL, DEFAULT_DTYPE
from .errors import DimensionError, NumericError, ValidationError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/eval paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    # note: np.ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags["C_CONTIGUOUS"] else np.asarray(arr, order="C")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return _make(self.data.astype(dtype), (self,), lambda g: (g.astype(self.dtype),))

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward without explicit grad requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # Leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- shape ops (methods mirror numpy) -------------------------------------
    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _wrap2(a, b) -> tuple[Tensor, Tensor]:
    """Wrap scalars/arrays with the other operand's dtype to avoid promotion."""
    if isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor):
        a = Tensor(a, dtype=b.dtype)
    else:
        a, b = Tensor(a), Tensor(b)
    return a, b


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Build an op result; drops the graph when grad is globally disabled."""
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = rg
    out.grad = None
    if rg:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                         _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _make(out, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """tanh-approximate GELU, the transformer MLP default."""
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * (x * x * x))  # x*x*x: float32 pow is very slow
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), backward)


# -- reductions / shape ------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Row lookup into an embedding table; gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (table,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires tensors with ndim >= 2")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if gb.shape != b.shape:
            gb = _unbroadcast(gb, b.shape)
        return (ga, gb)

    return _make(out, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted before exponentiation)."""
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, (a,), backward)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis; no learnable affine (modulation is external)."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    q, k, v share the trailing (S, d) shape (leading batch axes allowed).
    Each output row is a convex combination of v rows; weight rows sum to
    one within ATTN_ROW_SUM_TOL.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.ndim < 2 or q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise DimensionError(
            f"attention shapes inconsistent: q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[-1] < 1:
        raise DimensionError("attention head dimension must be >= 1")
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in attention input {name}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, k.swapaxes(-1, -2)), scale)
    weights = softmax(scores, axis=-1)
    rows = weights.data.sum(axis=-1)
    if not np.allclose(rows, 1.0, atol=ATTN_ROW_SUM_TOL):
        raise NumericError("attention rows failed to normalize")
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


# -- verification ------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float | None = None) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Returns max over parameter elements of
    |analytic - numeric| / max(1, |analytic|). f is re-evaluated with each
    element perturbed by ±h, so it must be a pure function of the params.
    """
    from .constants import GRAD_CHECK_STEP

    if h is None:
        h = GRAD_CHECK_STEP
    if h <= 0:
        raise ValidationError("grad_check step h must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    y = f()
    if not np.all(np.isfinite(y.data)):
        raise NumericError("grad_check: f() is non-finite")
    if y.requires_grad:
        y.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().data.item()
            flat[i] = orig - h
            down = f().data.item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("grad_check: perturbed f() is non-finite")
            numeric = (up - down) / (2.0 * h)
            ai = a.reshape(-1)[i]
            err = abs(ai - numeric) / max(1.0, abs(ai))
            if err > worst:
                worst = err
    return worst
