"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a backward closure.  Each node carries a global
creation sequence number, so :func:`backward` can replay the tape in exact
reverse order of the forward pass.
"""
from __future__ import annotations

import itertools
import math
import threading
import zlib
from contextlib import contextmanager

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "ComputeGraph", "tensor", "no_grad",
    "grad_enabled", "conv2d", "depthwise_conv2d", "add", "sub", "mul", "div", "scale",
    "elementwise", "relu6", "gelu_approx", "exp", "log2", "erfc", "absolute", "clamp",
    "maximum", "bound", "ste_round", "sum", "mean", "square", "upsample2x", "concat", "split",
    "crop", "backward", "trace", "record_kinks",
]

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense array plus optional gradient buffer.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` on every
    :func:`backward` call until :meth:`zero_grad` resets them.
    """

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(out: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    t.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


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


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim != b.data.ndim and min(a.data.ndim, b.data.ndim) > 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Pointwise ops
#
# Backward closures return one gradient (or None) per parent; broadcasting is
# undone by the tape walker.


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (g / b.data if a.requires_grad else None,
                -g * out / b.data if b.requires_grad else None)

    return _make(out, "div", (a, b), bw)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * a.dtype.type(s), "scale", (a,), lambda g: (g * s,))


@contextmanager
def record_kinks():
    """Collect a fingerprint of every piecewise op's active region while inside the block.

    Finite-difference checks use it to tell when a probe crossed a kink, where the
    one-sided derivatives differ and central differences are not an oracle.
    """
    prev = getattr(_state, "kinks", None)
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = prev


def _note_kink(*masks) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(tuple(zlib.crc32(np.packbits(m).tobytes()) for m in masks))


def relu6(a: Tensor) -> Tensor:
    mask = (a.data > 0) & (a.data < 6)
    _note_kink(a.data > 0, a.data < 6)
    return _make(np.clip(a.data, 0, 6), "relu6", (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_approx(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(0.5 * x * (1 + t), "gelu_approx", (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


_LN2 = math.log(2.0)


def log2(a: Tensor) -> Tensor:
    return _make(np.log2(a.data), "log2", (a,), lambda g: (g / (a.data * _LN2),))


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erfc(a: Tensor) -> Tensor:
    def bw(g):
        return (g * (-_TWO_OVER_SQRT_PI) * np.exp(-a.data * a.data),)

    return _make(special.erfc(a.data), "erfc", (a,), bw)


def absolute(a: Tensor) -> Tensor:
    _note_kink(a.data > 0)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    _note_kink(a.data >= lo, a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * mask,))


def bound(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; outside the box the gradient passes only if it points back inside."""
    x = a.data
    _note_kink(x >= lo, x <= hi)

    def bw(g):
        keep = ((x >= lo) & (x <= hi)) | ((x < lo) & (g < 0)) | ((x > hi) & (g > 0))
        return (g * keep,)

    return _make(np.clip(x, lo, hi), "bound", (a,), bw)


def maximum(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) against a constant; gradient flows only where a > floor."""
    mask = a.data > floor
    _note_kink(mask)
    return _make(np.maximum(a.data, a.dtype.type(floor)), "maximum", (a,), lambda g: (g * mask,))


def ste_round(a: Tensor) -> Tensor:
    """Round half to even in the forward pass, identity in the backward pass."""
    return _make(np.round(a.data), "ste_round", (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


_ELEMENTWISE = {"add": add, "mul": mul, "relu6": relu6, "gelu_approx": gelu_approx}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, mul, relu6, gelu_approx, scale (b is the factor)."""
    if op == "scale":
        return scale(a, float(b))
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    return _ELEMENTWISE[op](a)


# ---------------------------------------------------------------------------
# Reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum(dtype=a.dtype)), "sum", (a,),
                 lambda g: (np.broadcast_to(g, a.shape),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean(dtype=a.dtype)), "mean", (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape),))


# ---------------------------------------------------------------------------
# Spatial ops


def _conv_out(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2D convolution (cross-correlation) on NCHW input.

    Lowered to one matrix product over an im2col buffer whose reduction axis is
    laid out kernel-offset-major, channel-minor; the order is fixed for a given
    shape, so repeated evaluations are bitwise identical.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weight shape {weight.shape}")
    if bias is not None and bias.size != cout:
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")

    xp = _pad(x.data, padding)
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    taps = kh * kw
    cols = np.empty((taps, c, n, ho, wo), dtype=x.dtype)
    for t in range(taps):
        i, j = divmod(t, kw)
        cols[t] = xp[:, :, i:i + he:stride, j:j + we:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(taps * c, n * ho * wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, taps * c)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(cout, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1).reshape(bias.shape)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(taps, c, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
            for t in range(taps):
                i, j = divmod(t, kw)
                gxp[:, :, i:i + he:stride, j:j + we:stride] += gcols[t]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", parents, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; weight shape (C, 1, k, k)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: expected 4D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cw, one, kh, kw = weight.shape
    if cw != c or one != 1:
        raise ShapeError(f"depthwise_conv2d: input shape {x.shape} does not match weight shape {weight.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = _pad(x.data, padding)
    wd = weight.data
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wd[:, 0, i, j].reshape(1, c, 1, 1) * xp[:, :, i:i + he:stride, j:j + we:stride]
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def bw(g):
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + he:stride, j:j + we:stride])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += wd[:, 0, i, j].reshape(1, c, 1, 1) * g
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "depthwise_conv2d", parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return _make(out, "upsample2x", (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat(tensors: list, axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) if t.requires_grad else None
                     for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]))

    return _make(out, "concat", tuple(tensors), bw)


def _slice(x: Tensor, index: tuple, op: str) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), op, (x,), bw)


def split(x: Tensor, sizes: list, axis: int = 1) -> list:
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} of shape {x.shape}")
    parts, lo = [], 0
    for s in sizes:
        index = [slice(None)] * x.data.ndim
        index[axis] = slice(lo, lo + s)
        parts.append(_slice(x, tuple(index), "split"))
        lo += s
    return parts


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window."""
    if x.shape[2] == h and x.shape[3] == w:
        return x
    if h > x.shape[2] or w > x.shape[3]:
        raise ShapeError(f"crop: cannot crop shape {x.shape} to {h}x{w}")
    return _slice(x, (slice(None), slice(None), slice(0, h), slice(0, w)), "crop")


# ---------------------------------------------------------------------------
# Graph traversal


class ComputeGraph:
    """Nodes reachable from a root, in forward (creation) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @property
    def leaves(self) -> list:
        return [t for t in self.nodes if t._backward is None and t.requires_grad]


def trace(root: Tensor) -> ComputeGraph:
    seen, stack, nodes = set(), [root], []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return ComputeGraph(nodes)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Fill ``grad`` of every reachable leaf with d(loss)/d(leaf), accumulating."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.data.shape:
                gp = _unbroadcast(gp, p.data.shape)
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
