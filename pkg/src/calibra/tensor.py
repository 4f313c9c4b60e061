"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations needed by the network and its losses are provided.
Arrays may carry a leading batch axis: image ops accept ``[C, H, W]`` or
``[N, C, H, W]`` and return the same rank they were given.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, UsageError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients."""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class DiffArray:
    __slots__ = ("values", "grad", "requires_grad", "node", "name")

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "DiffArray":
        return DiffArray(self.values, dtype=self.values.dtype)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_array(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype))


def _make(values: np.ndarray, op: str, inputs: Sequence[DiffArray], backward: Callable) -> DiffArray:
    out = DiffArray(values, dtype=values.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


class Tape:
    """Topologically ordered record of the operations that produced an output."""

    def __init__(self, nodes: list[DiffArray]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: DiffArray) -> "Tape":
        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(out, False)]
        while stack:
            arr, expanded = stack.pop()
            if expanded:
                order.append(arr)
                continue
            if id(arr) in seen:
                continue
            seen.add(id(arr))
            stack.append((arr, True))
            if arr.node is not None:
                for parent in arr.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def backward(self, out: DiffArray, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for arr in reversed(self.nodes):
            g = grads.pop(id(arr), None)
            if g is None:
                continue
            if arr.node is None:
                arr.grad = arr.grad + g if arr.grad is not None else g.copy()
                continue
            parent_grads = arr.node.backward(g)
            for parent, pg in zip(arr.node.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.values.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).backward(loss, np.ones_like(loss.values))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    return _make(a.values + b.values, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    return _make(a.values - b.values, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> DiffArray:
    a, b = _pair(a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def power(a: DiffArray, p: float) -> DiffArray:
    av = a.values
    return _make(av**p, "pow", (a,), lambda g: (g * p * av ** (p - 1),))


def _pair(a, b) -> tuple[DiffArray, DiffArray]:
    if isinstance(a, DiffArray):
        return a, as_array(b, a)
    b = as_array(b)
    return as_array(a, b), b


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.values)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: DiffArray) -> DiffArray:
    av = a.values
    return _make(np.log(av), "log", (a,), lambda g: (g / av,))


def sigmoid(a: DiffArray) -> DiffArray:
    av = a.values
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a: DiffArray) -> DiffArray:
    av = a.values
    return _make(np.abs(av), "abs", (a,), lambda g: (g * np.sign(av),))


def clip(a: DiffArray, lo: float, hi: float) -> DiffArray:
    av = a.values
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), "clip", (a,), lambda g: (g * inside,))


def leaky_relu(a: DiffArray, slope: float = 0.01) -> DiffArray:
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky slope must lie in (0, 1), got {slope}")
    av = a.values
    neg = av < 0
    out = np.where(neg, av * av.dtype.type(slope), av)
    return _make(out, "leaky_relu", (a,), lambda g: (np.where(neg, g * g.dtype.type(slope), g),))


# ------------------------------------------------------------------- shaping


def reshape(a: DiffArray, shape) -> DiffArray:
    old = a.shape
    return _make(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def getitem(a: DiffArray, index) -> DiffArray:
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.values[index]), "getitem", (a,), back)


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    arrays = list(arrays)
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]
    values = np.concatenate([x.values for x in arrays], axis=axis)
    return _make(values, "concat", tuple(arrays), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- reductions


def sum_(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), "sum", (a,), back)


def mean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    count = a.values.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def _flat_extreme(a: DiffArray, naxes: int, use_max: bool) -> DiffArray:
    """Max (or min) over the trailing ``naxes`` axes, first occurrence wins."""
    av = a.values
    lead = av.shape[: av.ndim - naxes]
    flat = av.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1) if use_max else flat.argmin(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape, dtype = av.shape, av.dtype

    def back(g):
        gflat = np.zeros(flat.shape, dtype=dtype)
        np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (gflat.reshape(shape),)

    return _make(np.asarray(out), "amax" if use_max else "amin", (a,), back)


def amax(a: DiffArray, naxes: int = 1) -> DiffArray:
    return _flat_extreme(a, naxes, True)


def amin(a: DiffArray, naxes: int = 1) -> DiffArray:
    return _flat_extreme(a, naxes, False)


def global_max_pool(a: DiffArray) -> DiffArray:
    """Per-channel spatial maximum: ``[.., C, H, W] -> [.., C]``."""
    if a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ConfigurationError(f"global_max_pool needs H, W >= 1, got {a.shape}")
    return _flat_extreme(a, 2, True)


def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    av = a.values
    z = np.exp(av - av.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), back)


def minmax_normalize(a: DiffArray, naxes: int = 2, tiny: float = 1e-12) -> DiffArray:
    """(x - min) / (max - min) over the trailing ``naxes`` axes.

    Slices whose range is below ``tiny`` map to zeros with zero gradient.
    """
    av = a.values
    lead = av.shape[: av.ndim - naxes]
    flat = av.reshape(lead + (-1,))
    i_lo = flat.argmin(axis=-1)[..., None]
    i_hi = flat.argmax(axis=-1)[..., None]
    lo = np.take_along_axis(flat, i_lo, axis=-1)
    hi = np.take_along_axis(flat, i_hi, axis=-1)
    rng = hi - lo
    ok = rng >= tiny
    inv = np.where(ok, 1.0 / np.where(ok, rng, 1.0), 0.0).astype(av.dtype)
    y = (flat - lo) * inv
    shape = av.shape

    def back(g):
        gf = g.reshape(flat.shape)
        gx = gf * inv
        d_lo = ((gf * (y - 1.0)).sum(axis=-1, keepdims=True)) * inv
        d_hi = -((gf * y).sum(axis=-1, keepdims=True)) * inv
        np.put_along_axis(gx, i_lo, np.take_along_axis(gx, i_lo, axis=-1) + d_lo, axis=-1)
        np.put_along_axis(gx, i_hi, np.take_along_axis(gx, i_hi, axis=-1) + d_hi, axis=-1)
        return (gx.reshape(shape),)

    return _make(y.reshape(shape), "minmax_normalize", (a,), back)


# ------------------------------------------------------------------ image ops


def _as4d(a: DiffArray, what: str) -> tuple[DiffArray, bool]:
    if a.ndim == 4:
        return a, False
    if a.ndim == 3:
        return reshape(a, (1,) + a.shape), True
    raise ConfigurationError(f"{what}: expected [C,H,W] or [N,C,H,W], got shape {a.shape}")


def _squeeze_back(out: DiffArray, squeezed: bool) -> DiffArray:
    return reshape(out, out.shape[1:]) if squeezed else out


def conv2d(x: DiffArray, kernel: DiffArray, bias: DiffArray | None = None,
           stride: int = 1, padding: int = 0) -> DiffArray:
    """2-D cross-correlation. ``kernel`` is ``[C_out, C_in, k, k]``."""
    x4, squeezed = _as4d(x, "conv2d")
    n, c, h, w = x4.shape
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ConfigurationError(f"conv2d kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if c_in != c:
        raise ConfigurationError(f"conv2d: kernel expects {c_in} input channels, input has {c} (shape {x.shape})")
    if padding < 0 or stride < 1:
        raise ConfigurationError(f"conv2d: bad stride/padding {stride}/{padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigurationError(f"conv2d: input {h}x{w} too small for kernel {k} with padding {padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape}, expected ({c_out},)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xv = np.ascontiguousarray(x4.values)
    if k == 1 and stride == 1 and padding == 0:
        cols = xv.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = kernels.im2col(xv, k, stride, padding)
    wmat = kernel.values.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.values[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = gk = gb = None
        if x4.requires_grad:
            gcols = wmat.T @ gmat
            if k == 1 and stride == 1 and padding == 0:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, (n, c, h, w), k, stride, padding)
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x4, kernel, bias) if bias is not None else (x4, kernel)
    return _squeeze_back(_make(out, "conv2d", inputs, back), squeezed)


def max_pool2d(x: DiffArray, window: int = 2) -> DiffArray:
    x4, squeezed = _as4d(x, "max_pool2d")
    h, w = x4.shape[2:]
    if h % window or w % window:
        raise ConfigurationError(f"max_pool2d: {h}x{w} not divisible by window {window}")
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(x4.values), window)
    res = _make(out, "max_pool2d", (x4,), lambda g: (kernels.maxpool_backward(g, idx, window),))
    return _squeeze_back(res, squeezed)


def instance_norm(x: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Per-sample, per-channel standardization without affine parameters."""
    if eps <= 0:
        raise ConfigurationError("instance_norm: eps must be positive")
    x4, squeezed = _as4d(x, "instance_norm")
    xv = x4.values
    mu = xv.mean(axis=(2, 3), keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std

    def back(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv_std * (g - gm - xhat * gxm),)

    return _squeeze_back(_make(xhat, "instance_norm", (x4,), back), squeezed)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1]
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x: DiffArray, out_h: int, out_w: int) -> DiffArray:
    """Bilinear resize to ``(out_h, out_w)`` with half-pixel centres.

    Output pixel ``d`` samples input coordinate ``(d + 0.5) * in / out - 0.5``,
    clamped to the valid range; the two nearest input samples are blended
    linearly along each axis.
    """
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ConfigurationError(f"upsample_bilinear: target {out_h}x{out_w} smaller than {h}x{w}")
    mh = _interp_matrix(h, out_h, x.dtype)
    mw = _interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(mh, x.values), mw.T)
    return _make(out, "upsample_bilinear", (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def parameters_finite(arrays: Iterable[DiffArray]) -> bool:
    return all(np.isfinite(a.values).all() and (a.grad is None or np.isfinite(a.grad).all()) for a in arrays)
