"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced.  Calling
``backward()`` on a scalar result walks the graph in reverse topological
order and accumulates gradients into every tensor that requested them.
The op set is deliberately small: what the models in this package need,
nothing more.  All ops preserve the dtype of their inputs, so the same
graph code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


class NumericalError(RuntimeError):
    """A computation produced non-finite values (NaN or infinity)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation, metrics)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph walk ----------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into .grad of every requiring leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        topo = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def tensor(data, dtype=np.float32, requires_grad=False):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    """Create an op node; degrades to a plain leaf when grads are off."""
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to the pre-broadcast shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def neg(a):
    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward)


def power(a, p):
    """Elementwise a**p for a constant scalar exponent p."""
    p = float(p)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), backward)


def matmul(a, b):
    """a @ b with a of rank 2 or 3 and b of rank 2."""
    if b.ndim != 2 or a.ndim not in (2, 3):
        raise ValueError(f"matmul supports [T,C]@[C,D] or [B,T,C]@[C,D], got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        if a.ndim == 3:
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        else:
            gb = a.data.T @ g
        return ga, gb

    return _make(out, (a, b), backward)


# -- elementwise nonlinearities ---------------------------------------


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a):
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), backward)


def absolute(a):
    def backward(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), backward)


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def where(mask, a, b):
    """Select a where mask else b; mask is a constant bool ndarray."""
    mask = np.asarray(mask, dtype=bool)
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# -- reductions and shape ops ------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), backward)


def reshape(a, shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(parts, axis):
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        grads = []
        start = 0
        for size in sizes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            grads.append(g[tuple(sl)])
            start += size
        return tuple(grads)

    return _make(out, tuple(parts), backward)


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    axis = axis % a.ndim
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[sl]), (a,), backward)


def softmax_lastdim(a):
    """Numerically shifted softmax over the last axis."""
    shift = a - Tensor(a.data.max(axis=-1, keepdims=True))
    e = exp(shift)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return xc * inv * gamma + beta


# -- spatial ops on [B, C, H, W] maps ----------------------------------


def translate2d(a, dy, dx):
    """Shift a map by (dy, dx) pixels, filling vacated pixels with zero."""
    if a.ndim != 4:
        raise ValueError(f"translate2d expects [B,C,H,W], got {a.shape}")
    out = np.zeros_like(a.data)
    h, w = a.shape[2], a.shape[3]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yr = slice(max(-dy, 0), h + min(-dy, 0))
    xr = slice(max(-dx, 0), w + min(-dx, 0))
    if ys.start < ys.stop and xs.start < xs.stop:
        out[:, :, ys, xs] = a.data[:, :, yr, xr]

    def backward(g):
        gx = np.zeros_like(g)
        if ys.start < ys.stop and xs.start < xs.stop:
            gx[:, :, yr, xr] = g[:, :, ys, xs]
        return (gx,)

    return _make(out, (a,), backward)


def pad2d_replicate(a, pad):
    """Replicate-pad the two trailing axes of a [B,C,H,W] map by ``pad``."""
    h, w = a.shape[2], a.shape[3]
    yi = np.clip(np.arange(h + 2 * pad) - pad, 0, h - 1)
    xi = np.clip(np.arange(w + 2 * pad) - pad, 0, w - 1)
    out = a.data[:, :, yi[:, None], xi[None, :]]

    def backward(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), yi[:, None], xi[None, :]), g)
        return (gx,)

    return _make(out, (a,), backward)


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """2D cross-correlation with zero padding.

    x: [B, Cin, H, W], w: [Cout, Cin // groups, kh, kw], b: [Cout] or None.
    Implemented as a sum over kernel taps, each a batched matmul, which
    keeps both directions of the backward pass in BLAS.
    """
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin != cin_g * groups or cout % groups:
        raise ValueError(f"conv2d channel mismatch: x {x.shape}, w {w.shape}, groups {groups}")
    s = int(stride)
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    Ho = (Hp - kh) // s + 1
    Wo = (Wp - kw) // s + 1
    depthwise = groups == cin and cout == cin

    def tap_view(i, j):
        return xp[:, :, i : i + Ho * s : s, j : j + Wo * s : s].reshape(B, cin, Ho * Wo)

    out = np.zeros((B, cout, Ho * Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xv = tap_view(i, j)
            wt = w.data[:, :, i, j]
            if depthwise:
                out += wt[:, 0][None, :, None] * xv
            elif groups == 1:
                out += wt @ xv
            else:
                co = cout // groups
                for gidx in range(groups):
                    out[:, gidx * co : (gidx + 1) * co] += (
                        wt[gidx * co : (gidx + 1) * co] @ xv[:, gidx * cin_g : (gidx + 1) * cin_g]
                    )
    out = out.reshape(B, cout, Ho, Wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(B, cout, Ho * Wo)
        gw = np.zeros(w.shape, dtype=g.dtype)
        gxp = np.zeros((B, cin, Hp, Wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                xv = tap_view(i, j)
                dst = gxp[:, :, i : i + Ho * s : s, j : j + Wo * s : s]
                if depthwise:
                    gw[:, 0, i, j] = np.einsum("bct,bct->c", gm, xv)
                    dst += (w.data[:, 0, i, j][None, :, None] * gm).reshape(B, cin, Ho, Wo)
                elif groups == 1:
                    gw[:, :, i, j] = np.tensordot(gm, xv, axes=([0, 2], [0, 2]))
                    dst += (w.data[:, :, i, j].T @ gm).reshape(B, cin, Ho, Wo)
                else:
                    co = cout // groups
                    for gidx in range(groups):
                        gs = gm[:, gidx * co : (gidx + 1) * co]
                        xs = xv[:, gidx * cin_g : (gidx + 1) * cin_g]
                        gw[gidx * co : (gidx + 1) * co, :, i, j] = np.tensordot(gs, xs, axes=([0, 2], [0, 2]))
                        dst[:, gidx * cin_g : (gidx + 1) * cin_g] += (
                            w.data[gidx * co : (gidx + 1) * co, :, i, j].T @ gs
                        ).reshape(B, cin_g, Ho, Wo)
                        del gs, xs
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if b is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def upsample_nearest2x(a):
    """Double both spatial dims of a [B,C,H,W] map by pixel repetition."""
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        B, C, H2, W2 = g.shape
        return (g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), backward)
