"""Small dense-tensor engine with tape-based reverse-mode autodiff.

Every differentiable op creates a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
Tensors get a monotonically increasing id at creation, so sorting the
ancestors of an output by id yields a topological order for free.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, DomainError, NumericError, ParameterError

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Float64 array plus an optional gradient of the same size."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        graph = ComputeGraph.from_output(self)
        graph.backward(self, np.asarray(grad, dtype=np.float64))

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class Node:
    tensor: Tensor
    parents: list[int]


class ComputeGraph:
    """Ancestors of an output in creation (= topological) order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> ComputeGraph:
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        order = sorted(seen)
        index = {tid: i for i, tid in enumerate(order)}
        nodes = [Node(seen[tid], [index[p._id] for p in seen[tid]._parents]) for tid in order]
        return cls(nodes)

    def backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {out._id: seed}
        for node in reversed(self.nodes):
            t = node.tensor
            g = grads.pop(t._id, None)
            if g is None:
                continue
            if t._backward is None:
                # leaf
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast like numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold batch dims into rows: one large GEMM instead of many small ones
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), backward)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, relu: bool = False) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as one fused op, optionally
    followed by a ReLU."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot apply {w.shape} weight to {x.shape} input")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if b is not None:
        out += b.data
    if relu:
        np.maximum(out, 0.0, out=out)
    out2 = out
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        if relu:
            g2 = g2 * (out2 > 0)
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        grads = [gx, x2.T @ g2 if w.requires_grad else None]
        if b is not None:
            grads.append(np.ones(g2.shape[0]) @ g2)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]

    flat = ids.reshape(-1)
    unique = np.unique(flat).size == flat.size

    def backward(g):
        g2 = g.reshape(flat.size, -1)
        if unique:
            gt = np.zeros((n, g2.shape[1]))
            gt[flat] = g2
        elif n <= 4096:
            # scatter-add as a one-hot GEMM; np.add.at is far slower
            onehot = np.zeros((flat.size, n))
            onehot[np.arange(flat.size), flat] = 1.0
            gt = onehot.T @ g2
        else:
            gt = np.zeros((n, g2.shape[1]))
            np.add.at(gt, flat, g2)
        return (gt.reshape((n,) + table.shape[1:]),)

    return _make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------- elementwise


def place_rows(src: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """An (n, ...) tensor holding ``src[j]`` at row ``idx[j]`` and zeros
    elsewhere; ``idx`` must not repeat. Inverse of :func:`take_rows`."""
    src = _as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (src.shape[0],):
        raise DimensionError(f"place_rows: {idx.shape} indices for {src.shape[0]} rows")
    out = np.zeros((n,) + src.shape[1:])
    out[idx] = src.data
    return _make(out, (src,), lambda g: (g[idx],))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = out > 0
    return _make(out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive entry")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def attention(qkv: Tensor, key_bias: np.ndarray, p: float = 0.0,
              rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """Single-head scaled dot-product attention as one op.

    ``qkv`` is (B, L, 3h) holding query, key and value side by side;
    ``key_bias`` (broadcastable to B x L x L) is added to the scores before
    the softmax. Dropout on the attention weights draws its mask from
    ``rng`` exactly as :func:`dropout` would.
    """
    qkv = _as_tensor(qkv)
    if qkv.data.ndim != 3 or qkv.shape[-1] % 3:
        raise DimensionError(f"attention needs a (B, L, 3h) input, got {qkv.shape}")
    h = qkv.shape[-1] // 3
    scale = 1.0 / np.sqrt(h)
    d = qkv.data
    q, k, v = d[..., :h], d[..., h:2 * h], d[..., 2 * h:]
    s = np.matmul(q, k.transpose(0, 2, 1))
    s *= scale
    s += key_bias
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s, out=s)
    a /= a.sum(axis=-1, keepdims=True)
    keep = None
    if train and p > 0.0:
        if not p < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
        keep = (rng.random(a.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    ad = a if keep is None else a * keep
    out = np.matmul(ad, v)

    def backward(g):
        dv = np.matmul(ad.transpose(0, 2, 1), g)
        da = np.matmul(g, v.transpose(0, 2, 1))
        if keep is not None:
            da *= keep
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = np.matmul(ds, k)
        dk = np.matmul(ds.transpose(0, 2, 1), q)
        return (np.concatenate([dq, dk, dv], axis=-1),)

    return _make(out, (qkv,), backward)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-softmax; finite for any finite input."""
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(a: Tensor, eps: float = 1e-5, gain: Tensor | None = None,
               bias: Tensor | None = None) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply an
    optional elementwise ``gain`` and ``bias`` (both or neither)."""
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    a = _as_tensor(a)
    shape = a.shape
    n = shape[-1]
    affine = gain is not None
    gd = gain.data if affine else np.ones(n)
    bd = bias.data if affine else np.zeros(n)
    x2 = np.ascontiguousarray(a.data.reshape(-1, n))
    out, xhat, inv = _kernels.ln_forward(x2, gd, bd, float(eps))

    def backward(g):
        dx, dgain, dbias = _kernels.ln_backward(
            np.ascontiguousarray(g.reshape(-1, n)), xhat, inv, gd)
        dx = dx.reshape(shape)
        return [dx, dgain, dbias] if affine else [dx]

    parents = (a, gain, bias) if affine else (a,)
    return _make(out.reshape(shape), parents, backward)


L2_EPS = 1e-12


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    s = norm + L2_EPS
    out = a.data / s
    ad = a.data

    def backward(g):
        dot = (g * ad).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / s - ad * dot / (s * s * safe),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x``
    and central finite differences with step ``h``."""
    if not h > 0:
        raise ParameterError("finite-difference step must be > 0")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("f(x) is not finite")
    y.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("f is not finite near x")
            flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
