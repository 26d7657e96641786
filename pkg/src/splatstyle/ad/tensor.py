"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a float32/float64 ndarray and records the operation that
produced it; backward() walks the implicit compute graph in reverse
topological order and accumulates gradients into every reachable leaf
with requires_grad set.

Broadcasting is restricted to the leading-batch case: two shapes are
compatible when they are equal or when one is a suffix of the other.
Anything else must go through an explicit expand().
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import ContractError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _suffix_broadcast(sa: tuple, sb: tuple) -> tuple:
    """Output shape for suffix-only broadcasting; raises on anything else."""
    if sa == sb:
        return sa
    if len(sa) < len(sb):
        sa, sb = sb, sa
    if sb == sa[len(sa) - len(sb):]:
        return sa
    raise ShapeError("incompatible shapes (only leading-batch broadcast allowed)", sa, sb)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to a suffix shape (undo leading-dim broadcast)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


class Tensor:
    """A node in the compute graph: values, optional grad, provenance."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            grad = _reduce_to(grad, self.data.shape).reshape(self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        Gradients add up across calls; pair with zero_grad between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # Gradient buffers local to this traversal; leaves accumulate into .grad.
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if pg is None:
                        continue
                    pid = id(parent)
                    pg = _reduce_to(np.asarray(pg), parent.data.shape).reshape(parent.data.shape)
                    if pid in grads:
                        grads[pid] += pg
                    else:
                        grads[pid] = pg.astype(parent.data.dtype, copy=True)

    # -- operator sugar -------------------------------------------------------

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

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _result_dtype(*tensors):
    return np.result_type(*[t.data.dtype for t in tensors])


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def bwd(g):
        return ((a, g), (b, g))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def bwd(g):
        return ((a, g), (b, -g))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def bwd(g):
        return ((a, g * b.data), (b, g * a.data))

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast(a.shape, b.shape)
    data = a.data / b.data

    def bwd(g):
        return ((a, g / b.data), (b, -g * a.data / (b.data * b.data)))

    return _make(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return ((a, -g),)

    return _make(-a.data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return ((a, g * data),)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        return ((a, g / a.data),)

    return _make(data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g):
        return ((a, g * (0.5 / data)),)

    return _make(data, (a,), bwd)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** p

    def bwd(g):
        return ((a, g * p * a.data ** (p - 1)),)

    return _make(data, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, (a,), bwd)


def logistic(a) -> Tensor:
    """Numerically stable sigmoid."""
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def bwd(g):
        return ((a, g * data * (1.0 - data)),)

    return _make(data, (a,), bwd)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    data = (x * cdf).astype(x.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return ((a, g * (cdf + x * pdf)),)

    return _make(data, (a,), bwd)


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    a = as_tensor(a)
    data = np.abs(a.data)

    def bwd(g):
        return ((a, g * np.sign(a.data)),)

    return _make(data, (a,), bwd)


def clip(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)

    def bwd(g):
        return ((a, g * mask),)

    return _make(data, (a,), bwd)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    old = a.shape

    def bwd(g):
        return ((a, g.reshape(old)),)

    return _make(data, (a,), bwd)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return ((a, np.transpose(g, inv)),)

    return _make(data, (a,), bwd)


def expand(a, shape) -> Tensor:
    """Materialized broadcast to `shape` (numpy broadcasting rules)."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(f"cannot expand: {e}", a.shape, shape) from None
    in_shape = (1,) * (len(shape) - a.ndim) + a.shape
    axes = tuple(i for i, (d_in, d_out) in enumerate(zip(in_shape, shape)) if d_in == 1 and d_out != 1)
    old = a.shape

    def bwd(g):
        return ((a, g.sum(axis=axes).reshape(old) if axes else g.reshape(old)),)

    return _make(data, (a,), bwd)


def tslice(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return ((a, ga),)

    return _make(data, (a,), bwd)


def gather_rows(a, index) -> Tensor:
    """a[index] along axis 0 with integer index array; grads scatter-add back."""
    a = as_tensor(a)
    index = np.asarray(index)
    data = a.data[index]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return ((a, ga),)

    return _make(data, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            outs.append((t, g[tuple(sl)]))
        return tuple(outs)

    return _make(data, tensors, bwd)


# -- reductions ---------------------------------------------------------------


def _restore_dims(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(in_shape) for a in axes)
    if not keepdims:
        shape = [1 if i in axes else d for i, d in enumerate(in_shape)]
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        return ((a, _restore_dims(g, a.shape, axis, keepdims)),)

    return _make(np.asarray(data), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(np.asarray(data).size, 1)

    def bwd(g):
        return ((a, _restore_dims(g, a.shape, axis, keepdims) / n),)

    return _make(np.asarray(data), (a,), bwd)


def tmax(a, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax (deterministic)."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        return ((a, ga),)

    return _make(data, (a,), bwd)


# -- linear algebra / nn primitives ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs >=2-d operands", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dims differ", a.shape, b.shape)
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError("matmul leading dims differ", a.shape, b.shape)
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _reduce_to(ga, a.shape)), (b, _reduce_to(gb, b.shape)))

    return _make(data, (a, b), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((a, data * (g - dot)),)

    return _make(data, (a,), bwd)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat.astype(x.dtype)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((a, inv * (g - gm - xhat * gx)),)

    return _make(data, (a,), bwd)


def scatter_mean(values, index: np.ndarray, n_out: int) -> Tensor:
    """Mean-reduce rows of `values` (M, C) into (n_out, C) buckets by `index`.

    Buckets that receive no rows stay zero; caller is expected to pass a
    covering index set when that matters.
    """
    values = as_tensor(values)
    index = np.asarray(index).ravel()
    if values.ndim != 2 or index.shape[0] != values.shape[0]:
        raise ShapeError("scatter_mean expects (M, C) values and (M,) index", values.shape, index.shape)
    counts = np.bincount(index, minlength=n_out).astype(values.data.dtype)
    safe = np.maximum(counts, 1.0)
    acc = np.zeros((n_out, values.shape[1]), dtype=values.data.dtype)
    np.add.at(acc, index, values.data)
    data = acc / safe[:, None]

    def bwd(g):
        return ((values, g[index] / safe[index, None]),)

    return _make(data, (values,), bwd)


def conv2d_same(a, kernel: np.ndarray) -> Tensor:
    """2-d correlation of a (H, W) map with a small constant kernel, zero padding."""
    a = as_tensor(a)
    k = np.asarray(kernel, dtype=a.data.dtype)
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2

    def corr(x, kk):
        xp = np.pad(x, ((ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(xp, kk.shape)
        return np.einsum("ijkl,kl->ij", win, kk)

    data = corr(a.data, k)

    def bwd(g):
        return ((a, corr(g, k[::-1, ::-1])),)

    return _make(data, (a,), bwd)


def avg_pool2(a) -> Tensor:
    """2x2 average pooling of a (H, W) map; H and W must be even."""
    a = as_tensor(a)
    h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even dims", a.shape)
    data = a.data.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    def bwd(g):
        return ((a, np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25),)

    return _make(data, (a,), bwd)


# -- composite helpers ----------------------------------------------------------


def l1_loss(a, b) -> Tensor:
    """Mean absolute error over all entries."""
    return tmean(absolute(sub(a, b)))

def mse_loss(a, b) -> Tensor:
    d = sub(a, b)
    return tmean(mul(d, d))


def l2_norm(a, axis=-1, eps: float = 1e-8) -> Tensor:
    return sqrt(tsum(mul(a, a), axis=axis, keepdims=True) + eps)


def normalize(a, axis=-1, eps: float = 1e-8) -> Tensor:
    a = as_tensor(a)
    n = l2_norm(a, axis=axis, eps=eps)
    return div(a, expand(n, a.shape))


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine of the angle between two flattened tensors."""
    a, b = as_tensor(a), as_tensor(b)
    af = reshape(a, (a.size,))
    bf = reshape(b, (b.size,))
    num = tsum(mul(af, bf))
    den = mul(sqrt(tsum(mul(af, af)) + eps), sqrt(tsum(mul(bf, bf)) + eps))
    return div(num, den)
