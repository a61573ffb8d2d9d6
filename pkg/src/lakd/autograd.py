"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable op records a :class:`Node` on the active :class:`Tape`.
A node keeps the arrays its backward rule needs ("saved intermediates"); the
tape counts how many of those are alive so that activation memory can be
compared between training regimes.  ``backward`` frees the saved arrays of
every node it visits.

``detach`` aliases the value array and drops the graph link, so nothing
downstream of a detached tensor can send gradient upstream of it.
"""

from __future__ import annotations

import builtins
import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "no_grad",
    "is_grad_enabled",
    "current_tape",
    "tensor",
    "parameter",
    "detach",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "shift",
    "matmul",
    "relu",
    "abs",
    "sqrt",
    "square",
    "exp",
    "log",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "softmax",
    "log_softmax",
    "conv2d",
    "avg_pool2d",
    "max_pool2d",
    "upsample_nearest",
    "global_avg_pool",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph nodes (teacher forwards, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "saved", "tape")

    def __init__(self, op, inputs, backward_fn, saved, tape):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.saved = saved
        self.tape = tape

    @property
    def freed(self) -> bool:
        return self.saved is None

    def free(self) -> None:
        if self.saved is not None:
            self.tape._release(self.saved)
            self.saved = None

    def __repr__(self):
        return f"Node({self.op}, freed={self.freed})"


class Tape:
    """Append-only record of graph nodes plus retained-activation accounting.

    Use as a context manager to scope a training step::

        with Tape() as tape:
            loss = model(x)
            loss.backward()
        tape.peak_retained
    """

    _stack: list["Tape"] = []

    def __init__(self, keep_nodes: bool = True):
        self.keep_nodes = keep_nodes
        self.nodes: list[Node] = []
        self.retained_activation_count = 0
        self.retained_bytes = 0
        self.peak_retained = 0
        self.peak_bytes = 0

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def record(self, node: Node) -> None:
        if self.keep_nodes:
            self.nodes.append(node)
        self.retained_activation_count += len(node.saved)
        self.retained_bytes += builtins.sum(a.nbytes for a in node.saved)
        if self.retained_activation_count > self.peak_retained:
            self.peak_retained = self.retained_activation_count
        if self.retained_bytes > self.peak_bytes:
            self.peak_bytes = self.retained_bytes

    def _release(self, saved: tuple) -> None:
        self.retained_activation_count -= len(saved)
        self.retained_bytes -= builtins.sum(a.nbytes for a in saved)

    def release(self) -> None:
        """Free every node still holding saved arrays (e.g. unused branches)."""
        for node in self.nodes:
            node.free()

    def reset_peak(self) -> None:
        self.peak_retained = self.retained_activation_count
        self.peak_bytes = self.retained_bytes


# Catch-all tape for ops run outside any explicit ``with Tape()`` block.  It
# keeps no node list, only the counters.
_DEFAULT_TAPE = Tape(keep_nodes=False)


def current_tape() -> Tape:
    return Tape._stack[-1] if Tape._stack else _DEFAULT_TAPE


class Tensor:
    """An n-d float64 array with optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other) if _is_scalar(other) else sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_scalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
            saved: tuple = (), op: str = "") -> Tensor:
    requires = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = current_tape()
        node = Node(op, tuple(inputs), backward_fn, tuple(saved), tape)
        tape.record(node)
        out.node = node
    return out


def detach(t: Tensor) -> Tensor:
    """Same values (aliased, not copied), no graph node, no gradient."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = False
    out.node = None
    out.name = t.name
    return out


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Saved arrays of every visited node are released, so a graph can be
    traversed only once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("no graph to traverse: loss is detached or has no differentiable inputs")
    order = _topo_order(loss.node)
    pending: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            node.free()
            continue
        if node.freed:
            raise ContractError(f"graph already released at op {node.op!r}; backward twice?")
        in_grads = node.backward_fn(g, *node.saved)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t.node)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
        node.free()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, op="add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, op="sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape

    def bw(g, ad, bd):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _result(a.data * b.data, (a, b), bw, (a.data, b.data), op="mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    sa, sb = a.shape, b.shape
    out = a.data / b.data

    def bw(g, bd, o):
        return _unbroadcast(g / bd, sa), _unbroadcast(-g * o / bd, sb)

    return _result(out, (a, b), bw, (b.data, out), op="div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), op="neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant; also serves as normalization-by-constant."""
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), op="scale")


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data + c, (a,), lambda g: (g,), op="shift")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g, m: (g * m,), (mask,), op="relu")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g, s: (g * s,), (sign,), op="abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g, o: (g * 0.5 / o,), (out,), op="sqrt")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g, x: (2.0 * g * x,), (a.data,), op="square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g, o: (g * o,), (out,), op="exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g, x: (g / x,), (a.data,), op="log")


# reductions and shape ----------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), bw, op="sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _result(out, (a,), lambda g: (g.reshape(old),), op="reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), op="transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    ax = axis % tensors[0].ndim
    for i, t in enumerate(tensors[1:], 1):
        if t.ndim != tensors[0].ndim:
            raise DimensionError(f"concat: tensor {i} has rank {t.ndim}, expected {tensors[0].ndim}")
        for d in range(t.ndim):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise DimensionError(f"concat: tensor {i} mismatches on axis {d}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, op="concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner axis mismatch: {a.shape[1]} vs {b.shape[0]}")

    def bw(g, ad, bd):
        return g @ bd.T, ad.T @ g

    return _result(a.data @ b.data, (a, b), bw, (a.data, b.data), op="matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, s):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, (out,), op="softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g, o):
        return (g - np.exp(o) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, (out,), op="log_softmax")


# spatial ops ---------------------------------------------------------------------

def _check_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{what} expects a 4-d [N,C,H,W] tensor, got shape {t.shape}")


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _scatter_windows(gw: np.ndarray, shape: tuple, kh: int, kw: int, s: int, p: int) -> np.ndarray:
    """Inverse of window extraction: sum window-shaped grads [N,C,Ho,Wo,kh,kw]
    back onto the padded input grid, then strip the padding."""
    n, c, h, w = shape
    ho, wo = gw.shape[2], gw.shape[3]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gw[..., i, j]
    return dxp[:, :, p:p + h, p:p + w] if p else dxp


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, p: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,H,W] -> [C*kh*kw, N*ho*wo], zero padding ``p`` applied on the fly."""
    n, c, h, w = x.shape
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernel [K,C,kh,kw]."""
    _check_4d(x, "conv2d input")
    _check_4d(kernel, "conv2d kernel")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: channel axis (1) mismatch, input {c} vs kernel {kc}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding:
        raise DimensionError(f"conv2d: kernel height {kh} exceeds padded input height axis (2) {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel width {kw} exceeds padded input width axis (3) {w + 2 * padding}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    out = (kernel.data.reshape(k, -1) @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    k_shape = kernel.shape

    def bw(g, cols, kdata):
        g2 = g.transpose(1, 0, 2, 3).reshape(k, -1)
        gk = (g2 @ cols.T).reshape(k_shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # input grad = full correlation of the stride-dilated output grad
            # with the flipped, channel-transposed kernel
            hd, wd = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            if stride > 1:
                gd = np.zeros((n, k, hd, wd))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            hf, wf = hd + kh - 1, wd + kw - 1
            flipped = kdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dxp = (flipped @ _im2col(gd, kh, kw, 1, kh - 1, hf, wf)).reshape(c, n, hf, wf).transpose(1, 0, 2, 3)
            full = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            full[:, :, :hf, :wf] = dxp
            gx = full[:, :, padding:padding + h, padding:padding + w]
        return gx, gk

    return _result(out, (x, kernel), bw, (cols, kernel.data), op="conv2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0,
               count_include_pad: bool = True) -> Tensor:
    """Average pooling; with ``count_include_pad=False`` border windows divide by
    the number of real (unpadded) cells they cover."""
    _check_4d(x, "avg_pool2d")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise DimensionError(f"avg_pool2d: kernel {kernel} exceeds padded input {(h, w)}")
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    if count_include_pad or padding == 0:
        div_ = np.full((ho, wo), float(kernel * kernel))
    else:
        ones = _pad(np.ones((1, 1, h, w)), padding)
        div_ = sliding_window_view(ones, (kernel, kernel), axis=(2, 3))[0, 0, ::stride, ::stride].sum(axis=(-1, -2))
    out = win.sum(axis=(-1, -2)) / div_
    shape = x.shape

    def bw(g):
        gw = np.broadcast_to((g / div_)[..., None, None], g.shape + (kernel, kernel))
        return (_scatter_windows(gw, shape, kernel, kernel, stride, padding),)

    return _result(out, (x,), bw, op="avg_pool2d")


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling.  Ties route gradient to the first maximum in row-major
    window order.  Padding cells are -inf and never win."""
    _check_4d(x, "max_pool2d")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise DimensionError(f"max_pool2d: kernel {kernel} exceeds padded input {(h, w)}")
    xp = _pad(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (kernel * kernel,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g, arg):
        onehot = (arg[..., None] == np.arange(kernel * kernel)) * g[..., None]
        gw = onehot.reshape(g.shape + (kernel, kernel))
        return (_scatter_windows(gw, shape, kernel, kernel, stride, padding),)

    return _result(out, (x,), bw, (arg,), op="max_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_4d(x, "upsample_nearest")
    if factor < 1:
        raise ContractError("upsample factor must be >= 1")
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), bw, op="upsample_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]"""
    _check_4d(x, "global_avg_pool")
    return mean(x, axis=(2, 3))
