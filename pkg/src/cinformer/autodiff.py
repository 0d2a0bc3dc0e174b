"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation
records its parents and a backward rule; :meth:`Tensor.backward` sorts the
recorded graph topologically (the tape) and replays the rules in reverse.

Model state is 32-bit.  Operations keep the dtype of their inputs, so a
graph built from 64-bit leaves runs entirely in 64-bit (used by the
gradient checker).
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, SelectionIndexError, UsageError

GELU_COEF = 0.7978845608  # sqrt(2/pi), tanh approximation
GELU_CUBIC = 0.044715

_grad_enabled = True
# when a list, piecewise ops append their branch pattern (see record_branches)
_branch_log = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_branches():
    """Collect the branch choices of piecewise ops (relu masks, argmax, selections).

    Two evaluations with equal records lie on the same smooth piece.
    """
    global _branch_log
    prev = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def log_branch(pattern) -> None:
    if _branch_log is not None:
        _branch_log.append(np.asarray(pattern).copy())


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """An n-dimensional real array that can take part in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # backward -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` of every requires_grad leaf reachable from here.

        Gradients are added to any existing ``.grad`` so fan-out and repeated
        calls accumulate.  The recorded graph is released afterwards.
        """
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not on the gradient tape")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is _released:
                raise UsageError("graph was already released by an earlier backward()")
            if not node._parents:
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient for leaf {node.name or node.shape}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._parents:
                node._backward = _released
                node._parents = ()

    # operator sugar -------------------------------------------------------
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _released(g):
    raise UsageError("graph was already released by an earlier backward()")


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(_as_float_array(x, dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        if np.any(out == 0):
            raise NumericError("sqrt gradient at zero")
        return (g * 0.5 / out,)

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    log_branch(mask)
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def gelu(a) -> Tensor:
    """GELU with the tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_COEF * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = GELU_COEF * (1 + 3 * GELU_CUBIC * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), backward)


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return fn(*operands)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp,
    "log": log, "sqrt": sqrt, "relu": relu, "gelu": gelu, "sigmoid": sigmoid,
}


# matmul --------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# shape ---------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat extents differ: {[x.shape for x in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


# reductions ----------------------------------------------------------------

def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} out of range for shape {a.shape}")
        if a.shape[ax] == 0:
            raise DimensionError(f"reduction over empty axis {ax} of shape {a.shape}")
    return tuple(ax % a.ndim for ax in axes)


def _expand(g, shape, axes, keepdims):
    if axes is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.dtype)
    return _make(out, (a,), lambda g: (np.ascontiguousarray(_expand(g, shape, axes, keepdims)),))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _check_axis(a, axis)
    shape = a.shape
    n = a.size if axes is None else math.prod(shape[i] for i in axes)
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=a.dtype)
    return _make(out, (a,),
                 lambda g: (np.ascontiguousarray(_expand(g, shape, axes, keepdims)) / n,))


def reduce_max(a, axis: int, keepdims=False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal index."""
    a = as_tensor(a)
    (ax,) = _check_axis(a, axis)
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    log_branch(idx)
    out = np.take_along_axis(a.data, idx, axis=ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, ax), (a,), backward)


def variance(a, axis: int, keepdims=False) -> Tensor:
    """Population variance (divisor n) along one axis."""
    a = as_tensor(a)
    (ax,) = _check_axis(a, axis)
    n = a.shape[ax]
    centered = a.data - a.data.mean(axis=ax, keepdims=True)
    out = (centered * centered).mean(axis=ax, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * centered * (2.0 / n),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def reduce(kind: str, a, axis, keepdims=False) -> Tensor:
    if kind == "sum":
        return reduce_sum(a, axis, keepdims)
    if kind == "mean":
        return reduce_mean(a, axis, keepdims)
    if kind == "max":
        return reduce_max(a, axis, keepdims)
    if kind == "variance":
        return variance(a, axis, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


# normalisation -------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite softmax output")

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def layernorm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardise along ``axis`` without any affine transform."""
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y.astype(a.dtype, copy=False), (a,), backward)


# selection -----------------------------------------------------------------

def _check_index(idx, extent, what):
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise SelectionIndexError(f"{what} indexes must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise SelectionIndexError(f"{what} index out of range [0, {extent})")
    srt = np.sort(idx, axis=-1)
    if idx.shape[-1] > 1 and np.any(srt[..., 1:] == srt[..., :-1]):
        raise SelectionIndexError(f"duplicate {what} index")
    return idx


def _index_grid(shape, token_idx, channel_idx):
    """Broadcastable fancy-index tuple for a (..., N, C) array."""
    lead = shape[:-2]
    n, c = shape[-2:]
    if token_idx is None:
        token_idx = np.broadcast_to(np.arange(n), lead + (n,))
    if channel_idx is None:
        channel_idx = np.broadcast_to(np.arange(c), lead + (c,))
    token_idx = np.broadcast_to(token_idx, lead + token_idx.shape[-1:])
    channel_idx = np.broadcast_to(channel_idx, lead + channel_idx.shape[-1:])
    batch = np.ix_(*[np.arange(s) for s in lead]) if lead else ()
    batch = tuple(b[..., None, None] for b in batch)
    return batch + (token_idx[..., :, None], channel_idx[..., None, :])


def gather(x, token_idx=None, channel_idx=None) -> Tensor:
    """Restrict the last two axes of ``x`` to ``token_idx`` x ``channel_idx``.

    Index arrays carry the leading batch axes of ``x`` (or broadcast to
    them); ``None`` keeps every position on that axis.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"gather needs a (..., N, C) tensor, got {x.shape}")
    n, c = x.shape[-2:]
    if token_idx is not None:
        token_idx = _check_index(token_idx, n, "token")
    if channel_idx is not None:
        channel_idx = _check_index(channel_idx, c, "channel")
    grid = _index_grid(x.shape, token_idx, channel_idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[grid] = g
        return (full,)

    return _make(x.data[grid], (x,), backward)


def scatter_add(z, token_idx, channel_idx, shape) -> Tensor:
    """Write ``z`` into a zero tensor of ``shape`` at (token_idx x channel_idx)."""
    z = as_tensor(z)
    shape = tuple(shape)
    n, c = shape[-2:]
    if token_idx is not None:
        token_idx = _check_index(token_idx, n, "token")
    if channel_idx is not None:
        channel_idx = _check_index(channel_idx, c, "channel")
    grid = _index_grid(shape, token_idx, channel_idx)
    out = np.zeros(shape, dtype=z.dtype)
    try:
        out[grid] += z.data
    except ValueError:
        raise DimensionError(f"scatter payload {z.shape} does not fit the selection") from None
    return _make(out, (z,), lambda g: (g[grid],))


def gather_scatter(x, token_idx, channel_idx, mode: str, shape=None) -> Tensor:
    if mode == "gather":
        return gather(x, token_idx, channel_idx)
    if mode == "scatter_add":
        if shape is None:
            raise DimensionError("scatter_add needs the full output shape")
        return scatter_add(x, token_idx, channel_idx, shape)
    raise ValueError(f"unknown mode {mode!r}")


# spatial -------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, name: str = "conv2d") -> Tensor:
    """2-D cross-correlation of (B, C, H, W) with (O, C, kh, kw) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"{name}: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"{name}: input has {c} channels, weight expects {cw}")
    if stride < 1:
        raise DimensionError(f"{name}: stride must be >= 1")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"{name}: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _make(out, (x,),
                 lambda g: (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),))


def bilinear_matrix(n_in: int, factor: int, dtype=np.float32) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel sampling.

    Output index d samples source coordinate (d + 0.5)/factor - 0.5,
    clamped to the valid range.
    """
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for d in range(n_out):
        src = min(max((d + 0.5) / factor - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[d, i0] += 1 - t
        m[d, i1] += t
    return m.astype(dtype)


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    _, _, h, w = x.shape
    rows = Tensor._wrap(bilinear_matrix(h, factor, x.dtype))
    cols_t = Tensor._wrap(np.ascontiguousarray(bilinear_matrix(w, factor, x.dtype).T))
    return matmul(matmul(rows, x), cols_t)
