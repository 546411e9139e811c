"""Dense reverse-mode automatic differentiation on top of numpy.

A :class:`Tensor` wraps an ``ndarray`` and, when any input requires a
gradient, records a closure that pushes the output gradient back to its
parents.  :func:`backward` walks the recorded graph in reverse topological
order.  Every op checks its forward result for NaN/inf and raises
:class:`NonFiniteError` instead of silently propagating it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method sugar -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise binary ----------------------------------------------------

def _operands(a, b):
    # python scalars stay weakly typed so float32 graphs are not promoted
    ta = a if isinstance(a, (int, float)) else as_tensor(a)
    tb = b if isinstance(b, (int, float)) else as_tensor(b)
    ra = ta if isinstance(ta, (int, float)) else ta.data
    rb = tb if isinstance(tb, (int, float)) else tb.data
    parents = tuple(t for t in (ta, tb) if isinstance(t, Tensor))
    return ta, tb, ra, rb, parents


def _acc(t, g):
    if isinstance(t, Tensor):
        _accumulate(t, g)


def add(a, b) -> Tensor:
    ta, tb, ra, rb, parents = _operands(a, b)

    def bw(g):
        _acc(ta, g)
        _acc(tb, g)

    return _result(np.asarray(ra + rb), parents, bw, "add")


def sub(a, b) -> Tensor:
    ta, tb, ra, rb, parents = _operands(a, b)

    def bw(g):
        _acc(ta, g)
        _acc(tb, -g)

    return _result(np.asarray(ra - rb), parents, bw, "sub")


def mul(a, b) -> Tensor:
    ta, tb, ra, rb, parents = _operands(a, b)

    def bw(g):
        _acc(ta, g * rb)
        _acc(tb, g * ra)

    return _result(np.asarray(ra * rb), parents, bw, "mul")


def div(a, b) -> Tensor:
    ta, tb, ra, rb, parents = _operands(a, b)

    def bw(g):
        _acc(ta, g / rb)
        _acc(tb, -g * ra / (rb * rb))

    return _result(np.asarray(ra / rb), parents, bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _result(a.data**exponent, (a,), bw, "pow")


# -- elementwise unary ----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _result(out_data, (a,), lambda g: _accumulate(a, g * out_data), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: _accumulate(a, g * mask), "relu")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: _accumulate(a, g * sign), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _np_sigmoid(a.data)
    return _result(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(y, (a,), lambda g: _accumulate(a, g * _np_sigmoid(x)), "softplus")


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _result(y, (a,), bw, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the input is strictly inside the range."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside), "clip")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions and shape ------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape))

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(orig)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inv)), "transpose"
    )


def getitem(a, index) -> Tensor:
    """Basic and integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(np.asarray(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


# -- linear algebra ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")

    def bw(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (a,), bw, "softmax")


def layer_norm(a, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def bw(g):
        gx = g * weight.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accumulate(a, dx)
        lead = tuple(range(g.ndim - 1))
        _accumulate(weight, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))

    return _result(xhat * weight.data + bias.data, (a, weight, bias), bw, "layer_norm")


def conv1d(x, weight, bias=None) -> Tensor:
    """Channels-last 1-D convolution with "same" zero padding.

    x: (..., T, C_in); weight: (K, C_in, C_out), K odd; bias: (C_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    k = weight.shape[0]
    if k % 2 != 1:
        raise ValueError("conv1d kernel size must be odd for same padding")
    pad = k // 2
    t = x.shape[-2]
    pad_width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_width)
    # windows: (..., T, C_in, K) -> (..., T, K, C_in)
    win = np.swapaxes(sliding_window_view(xp, k, axis=-2), -1, -2)
    out = np.einsum("...tkc,kco->...to", win, weight.data)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        if weight.requires_grad:
            _accumulate(weight, np.einsum("nkc,no->kco", win.reshape(-1, k, win.shape[-1]), g.reshape(-1, g.shape[-1])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dwin = np.einsum("...to,kco->...tkc", g, weight.data)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[..., j : j + t, :] += dwin[..., j, :]
            _accumulate(x, dxp[..., pad : pad + t, :])

    return _result(out, parents, bw, "conv1d")


def dropout(a, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) so eval needs no rescale."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    keep = 1.0 - p
    mask = (rng.uniform(a.shape) < keep).astype(a.dtype) / keep
    return _result(a.data * mask, (a,), lambda g: _accumulate(a, g * mask), "dropout")


# -- backward --------------------------------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns a map from leaf tensor to gradient.  When ``params`` is given, every
    one of them appears in the map (zero if it does not influence the loss).
    Gradients are also left on ``leaf.grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))

    leaves: list[Tensor] = []
    for node in order:
        if node._backward is not None:
            node.grad = None
        elif node.requires_grad:
            node.grad = None
            leaves.append(node)

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # free interior buffers

    grads: dict[Tensor, np.ndarray] = {}
    for leaf in leaves:
        grads[leaf] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    if params is not None:
        for p in params:
            if p not in grads:
                p.grad = np.zeros_like(p.data)
                grads[p] = p.grad
    return grads
