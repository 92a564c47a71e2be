"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a :class:`Node` pointing back at their inputs; calling
:func:`backward` on a scalar result orders the reachable nodes into a
:class:`GraphTape` and replays it in reverse.

Training buffers default to float32. Gradient checks switch to float64 with
:func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Raised when backward is requested on something that is not on a tape."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """Record of one operation: its kind, its inputs and its vector-Jacobian product."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        # vjp(grad_out, needs) -> tuple of input grads (None where not needed)
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(op: str, data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, rg)
    if rg:
        out.node = Node(op, parents, vjp)
    return out


# ---------------------------------------------------------------------------
# broadcasting (trailing-dimension and scalar cases only)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= b.ndim or b.size == 1 and b.ndim <= a.ndim:
        return
    lo, hi = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(lo) < len(hi) and hi[len(hi) - len(lo):] == lo:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    size = int(np.prod(shape)) if shape else 1
    if size == 1:
        return grad.sum().reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _result("mul", ad * bd, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _result("matmul", ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise unary


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g, needs: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g, needs: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g, needs: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", x.data * mask, (x,), lambda g, needs: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)
    return _result("sigmoid", out, (x,), lambda g, needs: (g * out * (1 - out),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result("square", xd * xd, (x,), lambda g, needs: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), lambda g, needs: (g / (2 * out),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result("clamp", np.clip(xd, lo, hi), (x,), lambda g, needs: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g, needs):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _result("reshape", out, (x,), lambda g, needs: (g.reshape(src),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(_lift(x) for x in xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].ndim
    ax = axis % ndim
    for x in xs:
        if x.ndim != ndim or any(x.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, needs):
        idx = [slice(None)] * ndim
        grads = []
        for i, need in enumerate(needs):
            if need:
                idx[ax] = slice(bounds[i], bounds[i + 1])
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return _result("concat", np.concatenate([x.data for x in xs], axis=ax), xs, vjp)


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    fancy = _fancy(index)
    out = x.data[index]
    if out.size == 0:
        raise ShapeError(f"slice: index {index!r} selects nothing from {src_shape}")

    def vjp(g, needs):
        full = np.zeros(src_shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result("slice", np.asarray(out), (x,), vjp)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return getitem(x, tuple(idx))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result("reduce-sum", np.asarray(out), (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    count = x.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).astype(x.dtype),)

    return _result("reduce-mean", np.asarray(out, dtype=x.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# convolutions (NHWC layout, HWIO weights)


def _same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h: int, w: int, k: int, s: int, padding: str):
    if s not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {s}")
    if padding == "same":
        ho, pt, pb = _same_pads(h, k, s)
        wo, pl, pr = _same_pads(w, k, s)
    elif padding == "valid":
        if h < k or w < k:
            raise ShapeError(f"valid conv: input {h}x{w} smaller than kernel {k}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        pt = pb = pl = pr = 0
    else:
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # xp: (N, Hp, Wp, C) -> (N*ho*wo, k*k*C), ordered (kh, kw, C)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    n, c = xp.shape[0], xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _col2im(cols: np.ndarray, shape_p: tuple, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = shape_p
    out = np.zeros(shape_p, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            out[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += cols[:, :, :, i, j, :]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``x``: (N, H, W, Cin); ``w``: (k, k, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, wd, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    xp_shape = xp.shape

    def vjp(g, needs):
        gflat = g.reshape(n * ho * wo, cout)
        gx = gw = None
        if needs[0]:
            gp = _col2im(gflat @ wmat.T, xp_shape, k, stride, ho, wo)
            gx = gp[:, pt:pt + h, pl:pl + wd, :]
        if needs[1]:
            gw = (cols.T @ gflat).reshape(w.shape)
        return gx, gw

    return _result("conv2d", out, (x, w), vjp)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 2, padding: str = "same") -> Tensor:
    """Adjoint of :func:`conv2d`. ``x``: (N, H, W, Cin); ``w``: (k, k, Cout, Cin).

    With ``same`` padding the output is (N, H*stride, W*stride, Cout).
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[3]:
        raise ShapeError(f"conv2d-transpose: incompatible shapes {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    n, h, wd, cin = x.shape
    k, cout = w.shape[0], w.shape[2]
    if padding == "same":
        if k < stride:
            raise ShapeError(f"conv2d-transpose: kernel {k} smaller than stride {stride}")
        ho, wo = h * stride, wd * stride
        pt = pl = (k - stride) // 2
    elif padding == "valid":
        ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k
        pt = pl = 0
    else:
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = (h - 1) * stride + k, (wd - 1) * stride + k
    wmat = w.data.reshape(k * k * cout, cin)
    xflat = x.data.reshape(n * h * wd, cin)
    full = _col2im(xflat @ wmat.T, (n, hp, wp, cout), k, stride, h, wd)
    out = np.ascontiguousarray(full[:, pt:pt + ho, pl:pl + wo, :])

    def vjp(g, needs):
        gp = np.zeros((n, hp, wp, cout), dtype=g.dtype)
        gp[:, pt:pt + ho, pl:pl + wo, :] = g
        cols = _im2col(gp, k, stride, h, wd)
        gx = (cols @ wmat).reshape(x.shape) if needs[0] else None
        gw = (cols.T @ xflat).reshape(w.shape) if needs[1] else None
        return gx, gw

    return _result("conv2d-transpose", out, (x, w), vjp)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample-nearest expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def vjp(g, needs):
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return _result("upsample-nearest", out, (x,), vjp)


def batch_stats(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize by per-channel batch statistics (channels = last axis).

    Returns the normalized tensor plus the batch mean and (biased) variance.
    """
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def vjp(g, needs):
        gsum = g.sum(axis=axes)
        gxsum = (g * xhat).sum(axis=axes)
        return ((inv / count) * (count * g - gsum - xhat * gxsum),)

    return _result("batch-stats", xhat.astype(x.dtype, copy=False), (x,), vjp), mean, var


# ---------------------------------------------------------------------------
# dispatcher

_UNARY = {"exp": exp, "log": log, "tanh": tanh, "relu": relu, "sigmoid": sigmoid,
          "square": square, "sqrt": sqrt}


def forward_op(name: str, inputs: Sequence, **params) -> Tensor:
    """Apply op ``name`` to ``inputs`` by string kind."""
    if name in _UNARY:
        (x,) = inputs
        return _UNARY[name](_lift(x))
    binary = {"add": add, "sub": sub, "mul": mul, "matmul": matmul}
    if name in binary:
        return binary[name](*inputs)
    if name == "softmax":
        return softmax(inputs[0], **params)
    if name == "reshape":
        return reshape(inputs[0], params["shape"])
    if name == "concat":
        return concat(inputs, **params)
    if name == "slice":
        return slice_(inputs[0], **params)
    if name == "reduce-sum":
        return reduce_sum(inputs[0], **params)
    if name == "reduce-mean":
        return reduce_mean(inputs[0], **params)
    if name == "conv2d":
        return conv2d(*inputs, **params)
    if name == "conv2d-transpose":
        return conv2d_transpose(*inputs, **params)
    if name == "upsample-nearest":
        return upsample_nearest(inputs[0], **params)
    if name == "batch-stats":
        return batch_stats(inputs[0], **params)[0]
    raise ValueError(f"unknown op kind {name!r}")


# ---------------------------------------------------------------------------
# backward


@dataclass
class GraphTape:
    """Operations reachable from a loss, in topological order (producers first)."""

    tensors: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "GraphTape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    @property
    def ops(self) -> list:
        return [t.node.op for t in self.tensors if t.node is not None]


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None,
             accumulate: bool = True) -> dict:
    """Backpropagate from a scalar ``loss``.

    With ``inputs=None`` every reachable leaf that requires grad receives its
    gradient in ``.grad`` (summed with anything already there). With
    ``inputs`` given, only those tensors are targeted, the rest of the graph
    is pruned, and unreachable inputs map to zeros.
    """
    if not isinstance(loss, Tensor) or loss.node is None:
        raise GraphError("loss is not on tape (no recorded graph)")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GraphTape.from_root(loss)
    targets = None if inputs is None else list(inputs)

    if targets is None:
        relevant = None
    else:
        target_ids = {id(t) for t in targets}
        relevant = set()
        for t in tape.tensors:
            if id(t) in target_ids or (t.node is not None
                                       and any(id(p) in relevant for p in t.node.parents)):
                relevant.add(id(t))

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            leaf_grads[id(t)] = (t, g)
            continue
        parents = t.node.parents
        if relevant is None:
            needs = tuple(p.requires_grad for p in parents)
        else:
            needs = tuple(id(p) in relevant for p in parents)
        pgrads = t.node.vjp(g, needs)
        for p, need, pg in zip(parents, needs, pgrads):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if targets is None:
        result = {}
        for t, g in leaf_grads.values():
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            if accumulate:
                t.grad = g.copy() if t.grad is None else t.grad + g
            result[t] = g
        return result

    result = {}
    for t in targets:
        if id(t) in leaf_grads:
            g = np.asarray(leaf_grads[id(t)][1], dtype=t.dtype).reshape(t.shape)
        else:
            g = np.zeros_like(t.data)
        if accumulate and t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``inputs`` without touching ``.grad``."""
    got = backward(loss, inputs, accumulate=False)
    return [got[t] for t in inputs]


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Evaluation happens in float64.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    with default_dtype(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        xt = Tensor(x0.copy(), requires_grad=True)
        y = f(xt)
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("f(x) is not finite at the base point")
        if y.node is None:
            analytic = np.zeros_like(x0)
        else:
            analytic = grad(y, [xt])[0]
        numeric = np.zeros_like(x0)
        flat = x0.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f(Tensor(x0.copy())).item()
                flat[i] = orig - h
                down = f(Tensor(x0.copy())).item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    coord = tuple(int(c) for c in np.unravel_index(i, x0.shape))
                    raise FloatingPointError(f"non-finite output at coordinate {coord}")
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
    bad = ~np.isfinite(analytic)
    if bad.any():
        coord = tuple(int(c) for c in np.argwhere(bad)[0])
        raise FloatingPointError(f"non-finite analytic gradient at coordinate {coord}")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
