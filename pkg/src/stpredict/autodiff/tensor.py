"""Define-by-run reverse-mode autodiff over dense numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output cotangent to parent cotangents. The
graph is rebuilt on every forward pass.
"""
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import backend

__all__ = [
    "Tensor", "ShapeError", "no_grad", "is_grad_enabled", "flop_counter",
    "tensor", "zeros", "conv2d", "sigmoid", "tanh", "relu", "add", "sub",
    "mul", "scale", "concat", "channels", "pool", "affine", "reshape",
    "sum", "mean", "mse", "gate_update",
]

_grad_enabled = True
_flops = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


@contextmanager
def flop_counter():
    """Tally analytic FLOPs of every op executed inside the block.

    Yields a one-element list whose entry holds the running total.
    """
    global _flops
    prev, _flops = _flops, [0]
    try:
        yield _flops
    finally:
        _flops = prev


def _tally(n):
    if _flops is not None:
        _flops[0] += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        if self.data.ndim > 5:
            raise ShapeError(f"at most 5 axes supported, got shape {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    # -- reverse pass --------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requiring leaf.

        Intermediate cotangents live only for the duration of the call, so
        calling twice on the same graph doubles the leaf gradients exactly.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        cot = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = cot.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = cot.get(key)
                cot[key] = pg if prev is None else prev + pg


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def _result(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data), requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)


def _check_broadcast(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0 or np.prod(shape) == 1:
        return g.sum().reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise --------------------------------------------------------

def _add_scalar(a, c):
    out = a.data + a.data.dtype.type(c)
    _tally(out.size)
    return _result(out, (a,), lambda g: (g,), "add_scalar")


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return _add_scalar(a, b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data
    _tally(out.size)
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        return _add_scalar(scale(b, -1.0), a)
    if not isinstance(b, Tensor):
        return _add_scalar(a, -b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data
    _tally(out.size)
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    _tally(out.size)

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _result(out, (a, b), back, "mul")


def scale(a, c):
    c = float(c)
    out = a.data * a.data.dtype.type(c)
    _tally(out.size)
    return _result(out, (a,), lambda g: (g * g.dtype.type(c),), "scale")


def sigmoid(a):
    y = expit(a.data)
    _tally(y.size)
    return _result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a):
    y = np.tanh(a.data)
    _tally(y.size)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a):
    mask = a.data > 0
    y = a.data * mask
    _tally(y.size)
    return _result(y, (a,), lambda g: (g * mask,), "relu")


# -- structural ---------------------------------------------------------

def concat(items, axis=1):
    items = list(items)
    if len(items) == 1:
        return items[0]
    out = np.concatenate([t.data for t in items], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in items])

    def back(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)
    return _result(out, tuple(items), back, "concat")


def channels(a, start, stop):
    """Slice ``a[:, start:stop]``."""
    out = np.ascontiguousarray(a.data[:, start:stop])
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)
    return _result(out, (a,), back, "channels")


def reshape(a, shape):
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


# -- reductions -----------------------------------------------------------

def pool(a, kind, axis):
    """Global pooling of a ``[B, C, H, W]`` tensor.

    ``axis="spatial"`` reduces H×W to 1×1, ``axis="channel"`` reduces C to 1.
    Max-pool routes the gradient to the first maximal element in row-major
    order.
    """
    if a.ndim != 4:
        raise ShapeError(f"pool expects [B, C, H, W], got {a.shape}")
    if kind not in ("avg", "max") or axis not in ("spatial", "channel"):
        raise ValueError(f"unsupported pooling kind={kind!r} axis={axis!r}")
    B, C, H, W = a.shape
    if a.data.size == 0 or (axis == "spatial" and H * W == 0) or (axis == "channel" and C == 0):
        raise ShapeError(f"pool over an empty axis: {a.shape}")
    _tally(a.data.size)
    x = a.data
    if axis == "spatial":
        flat = x.reshape(B, C, H * W)
        if kind == "avg":
            out = flat.mean(axis=2).reshape(B, C, 1, 1)
            n = H * W
            return _result(out, (a,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "avgpool_s")
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], 2).reshape(B, C, 1, 1)

        def back(g):
            gx = np.zeros((B, C, H * W), dtype=x.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(B, C, 1), 2)
            return (gx.reshape(x.shape),)
        return _result(out, (a,), back, "maxpool_s")
    if kind == "avg":
        out = x.mean(axis=1, keepdims=True)
        return _result(out, (a,), lambda g: (np.broadcast_to(g / C, x.shape).copy(),), "avgpool_c")
    idx = x.argmax(axis=1)[:, None]
    out = np.take_along_axis(x, idx, 1)

    def back_c(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, g, 1)
        return (gx,)
    return _result(out, (a,), back_c, "maxpool_c")


def sum(a):
    _tally(a.data.size)
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(())
    return _result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    n = a.data.size
    _tally(n)
    shape = a.shape
    out = np.asarray(a.data.mean(), dtype=a.dtype).reshape(())
    return _result(out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def mse(pred, target):
    """Mean squared error; ``target`` may be an array or a Tensor."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype), dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t.data
    n = diff.size
    _tally(3 * n)
    out = np.asarray(np.vdot(diff, diff) / n, dtype=pred.dtype).reshape(())

    def back(g):
        d = diff * (2 * g / n)
        return d, -d
    return _result(out, (pred, t), back, "mse")


# -- dense layers ---------------------------------------------------------

def affine(x, w, b=None):
    """``x @ w.T + b`` for ``x: [B, C]``, ``w: [Cout, C]``, ``b: [Cout]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out += b.data
    _tally(2 * out.size * xd.shape[1] + (out.size if b is not None else 0))

    def back(g):
        return g @ wd, g.T @ xd, (g.sum(axis=0) if b is not None else None)
    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, back, "affine")


def conv2d(x, w, b=None):
    """Stride-1 cross-correlation with "same" zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} must both be 4-D")
    O, Cin, kh, kw = w.shape
    if x.shape[1] != Cin:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels, kernel {w.shape} expects {Cin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel {w.shape} must be square with odd size")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias {b.shape} vs kernel {w.shape}")
    pad = (kh - 1) // 2
    K = backend.kernels
    out, cols = K.conv2d_forward(x.data, w.data, None if b is None else b.data, pad)
    B, _, H, W = x.shape
    _tally(2 * kh * kw * Cin * O * B * H * W + (O * B * H * W if b is not None else 0))

    def back(g):
        g = np.ascontiguousarray(g)
        gx, gw, gb = K.conv2d_backward(g, x.data, w.data, cols, pad,
                                       x.requires_grad, w.requires_grad or (b is not None and b.requires_grad))
        return (gx, gw, gb) if b is not None else (gx, gw)
    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, back, "conv2d")


def gate_update(pre, mem):
    """Fused LSTM memory update.

    ``pre`` holds the stacked pre-activations ``[g, i, f]`` (3·C channels);
    returns ``sigmoid(f) * mem + sigmoid(i) * tanh(g)``.
    """
    if pre.ndim != 4 or mem.ndim != 4 or pre.shape[1] != 3 * mem.shape[1] \
            or pre.shape[0] != mem.shape[0] or pre.shape[2:] != mem.shape[2:]:
        raise ShapeError(f"gate_update: pre-activations {pre.shape} vs memory {mem.shape}")
    K = backend.kernels
    out, act = K.gate_forward(pre.data, mem.data)
    _tally(6 * out.size)

    def back(g):
        return K.gate_backward(np.ascontiguousarray(g), mem.data, act)
    return _result(out, (pre, mem), back, "gate_update")
