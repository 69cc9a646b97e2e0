"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Tracked tensors carry a :class:`Node`
recording the primitive that produced them, its parents and a vector-Jacobian
closure. Every closure is written in terms of other primitives, so when
:func:`grad` runs with ``retain_higher=True`` the returned gradients are
themselves tracked expressions and can be differentiated again.

Live nodes are counted so callers can measure the peak size of the graphs
they build (see :func:`graph_stats` and :func:`track_peak`).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "as_tensor",
    "no_grad",
    "strict_mode",
    "default_dtype",
    "get_default_dtype",
    "grad",
    "backward",
    "vjp",
    "graph_stats",
    "track_peak",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when an op produces NaN or inf."""


class GraphError(RuntimeError):
    """Raised for invalid differentiation requests (e.g. untracked loss)."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.strict = False
        self.dtype = np.float64


_state = _State()


class _Counter:
    # shared across threads; only used for instrumentation
    lock = threading.Lock()
    live = 0
    peak = 0
    created = 0


class Node:
    """Graph record for one primitive application."""

    __slots__ = ("op", "parents", "vjp_fn", "__weakref__")

    def __init__(self, op: str, parents: tuple, vjp_fn: Callable | None):
        self.op = op
        self.parents = parents
        self.vjp_fn = vjp_fn
        with _Counter.lock:
            _Counter.live += 1
            _Counter.created += 1
            if _Counter.live > _Counter.peak:
                _Counter.peak = _Counter.live

    def __del__(self):
        with _Counter.lock:
            _Counter.live -= 1

    def __repr__(self):
        return f"Node({self.op}, parents={len(self.parents)})"


def graph_stats() -> dict:
    """Current live/peak/total node counts."""
    return {"live": _Counter.live, "peak": _Counter.peak, "created": _Counter.created}


class _PeakTracker:
    def __init__(self):
        self.start = 0
        self.peak = 0

    @property
    def extra(self) -> int:
        """Peak number of nodes alive above the level at entry."""
        return self.peak - self.start


@contextlib.contextmanager
def track_peak():
    """Measure the peak live-node count inside a block.

    >>> with track_peak() as t:
    ...     pass
    >>> t.extra
    0
    """
    tracker = _PeakTracker()
    with _Counter.lock:
        tracker.start = _Counter.live
        saved_peak = _Counter.peak
        _Counter.peak = _Counter.live
    try:
        yield tracker
    finally:
        with _Counter.lock:
            tracker.peak = _Counter.peak
            _Counter.peak = max(saved_peak, _Counter.peak)


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def _enable_grad(flag: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = flag
    try:
        yield
    finally:
        _state.grad_enabled = prev


def enable_grad():
    """Re-enable graph recording, e.g. for losses that contain inner gradients."""
    return _enable_grad(True)


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Raise :class:`NonFiniteError` whenever an op yields NaN/inf."""
    prev = _state.strict
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def get_default_dtype():
    return _state.dtype


def _to_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if data.dtype.kind == "f":
            return data
        return data.astype(_state.dtype)
    return np.asarray(data, dtype=dtype or _state.dtype)


class Tensor:
    """Dense array with an optional graph node.

    ``Tensor(x, requires_grad=True)`` creates a tracked leaf. Tensors without
    a node are treated as constants and must not be mutated once used.
    """

    __slots__ = ("data", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _to_array(data, dtype)
        self.node = Node("leaf", (), None) if requires_grad else None

    @classmethod
    def _wrap(cls, data: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.node = node
        return t

    # -- introspection -----------------------------------------------------
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

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and not isinstance(x, np.ndarray):
        return Tensor._wrap(np.asarray(x, dtype=like.dtype), None)
    return Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, vjp_fn: Callable) -> Tensor:
    if _state.strict and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output")
    if _state.grad_enabled and any(p.node is not None for p in parents):
        return Tensor._wrap(data, Node(op, parents, vjp_fn))
    return Tensor._wrap(data, None)


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def vjp_fn(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _make("add", a.data + b.data, (a, b), vjp_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def vjp_fn(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _make("sub", a.data - b.data, (a, b), vjp_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def vjp_fn(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _make("mul", a.data * b.data, (a, b), vjp_fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def vjp_fn(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), vjp_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g, needs: (neg(g),))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# unary nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make("exp", np.exp(a.data), (a,), lambda g, needs: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g, needs: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _make("sqrt", np.sqrt(a.data), (a,), lambda g, needs: (div(g, mul(sqrt(a), 2.0)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)

    def vjp_fn(g, needs):
        t = tanh(a)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _make("tanh", np.tanh(a.data), (a,), vjp_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(a.dtype)
    return _make("relu", a.data * mask, (a,), lambda g, needs: (mul(g, Tensor._wrap(mask, None)),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make("leaky_relu", a.data * factor, (a,),
                 lambda g, needs: (mul(g, Tensor._wrap(factor, None)),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def vjp_fn(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _make("matmul", a.data @ b.data, (a, b), vjp_fn)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g, needs: (transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g, needs: (reshape(g, src),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp_fn(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp_fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return div(tsum(a, axes, keepdims), float(count))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise _shape_error("broadcast_to", a.shape, shape) from None
    src = a.shape
    return _make("broadcast_to", out, (a,), lambda g, needs: (sum_to(g, src),))


def _sum_to_array(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(a, shape) -> Tensor:
    """Reduce ``a`` by summation down to a shape it was broadcast from."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make("sum_to", _sum_to_array(a.data, shape), (a,),
                 lambda g, needs: (broadcast_to(g, src),))


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    out = a.data[key]
    src_shape = a.shape
    return _make("getitem", np.ascontiguousarray(out), (a,),
                 lambda g, needs: (setitem_zeros(g, src_shape, key),))


def setitem_zeros(g, shape, key) -> Tensor:
    """Adjoint of :func:`getitem`: zeros of ``shape`` with ``g`` placed at ``key``."""
    g = as_tensor(g)
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g.data
    return _make("setitem_zeros", out, (g,), lambda h, needs: (getitem(h, key),))


def pad(a, pads) -> Tensor:
    """Zero padding; ``pads`` is a per-axis list of (before, after)."""
    a = as_tensor(a)
    pads = tuple((int(p[0]), int(p[1])) for p in pads)
    if len(pads) != a.ndim:
        raise ShapeError(f"pad: {len(pads)} pad pairs for shape {a.shape}")
    key = tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, a.shape))
    return _make("pad", np.pad(a.data, pads), (a,), lambda g, needs: (getitem(g, key),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors]) from None
    axis = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp_fn(g, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(getitem(g, tuple(key)))
        return tuple(grads)

    return _make("concat", out, tuple(tensors), vjp_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis)


def index_select(a, index) -> Tensor:
    """Gather rows ``a[index]`` along axis 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"index_select: index out of range for axis of size {a.shape[0]}")
    n = a.shape[0]
    return _make("index_select", a.data[index], (a,),
                 lambda g, needs: (index_add(g, index, n),))


def index_add(g, index, n) -> Tensor:
    """Scatter-add rows of ``g`` into a zero array with ``n`` rows."""
    g = as_tensor(g)
    out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, index, g.data)
    return _make("index_add", out, (g,), lambda h, needs: (index_select(h, index),))


# ---------------------------------------------------------------------------
# convolution lowering and sparse resampling


def im2col(x, kh: int, kw: int) -> Tensor:
    """Channels-last patch matrix: (N, H, W, C) -> (N*Ho*Wo, kh*kw*C), stride 1."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if h < kh or w < kw:
        raise _shape_error("im2col", x.shape, (kh, kw))
    ho, wo = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    src = x.shape
    return _make("im2col", cols, (x,), lambda g, needs: (col2im(g, src, kh, kw),))


def col2im(cols, shape, kh: int, kw: int) -> Tensor:
    """Adjoint of :func:`im2col` (overlapping patches are summed)."""
    cols = as_tensor(cols)
    n, h, w, c = shape
    ho, wo = h - kh + 1, w - kw + 1
    patches = cols.data.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ho, j:j + wo, :] += patches[:, :, :, i, j, :]
    return _make("col2im", out, (cols,), lambda g, needs: (im2col(g, kh, kw),))


def avg_pool(x, k: int, axes=(1, 2)) -> Tensor:
    """Non-overlapping k x k mean pooling over two adjacent spatial axes."""
    x = as_tensor(x)
    a0, a1 = axes
    if a1 != a0 + 1 or x.shape[a0] % k or x.shape[a1] % k:
        raise ShapeError(f"avg_pool: spatial dims {x.shape} not divisible by window {k}")
    shape = x.shape[:a0] + (x.shape[a0] // k, k, x.shape[a1] // k, k) + x.shape[a1 + 1:]
    out = x.data.reshape(shape).mean(axis=(a0 + 1, a0 + 3))
    return _make("avg_pool", out, (x,),
                 lambda g, needs: (div(upsample_nearest(g, k, axes), float(k * k)),))


def upsample_nearest(x, k: int, axes=(1, 2)) -> Tensor:
    """Repeat each pixel k times along two adjacent spatial axes."""
    x = as_tensor(x)
    a0, a1 = axes
    out = np.repeat(np.repeat(x.data, k, axis=a0), k, axis=a1)
    return _make("upsample_nearest", out, (x,),
                 lambda g, needs: (mul(avg_pool(g, k, axes), float(k * k)),))


def normalize(x, axes, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) with statistics taken over ``axes``."""
    x = as_tensor(x)
    axes = _norm_axis(axes, x.ndim)
    m = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - m
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    y = centered * inv

    def vjp_fn(g, needs):
        if not _state.grad_enabled or (g.node is None and x.node is None):
            gd = g.data
            dx = inv * (gd - gd.mean(axis=axes, keepdims=True)
                        - y * (gd * y).mean(axis=axes, keepdims=True))
            return (Tensor._wrap(dx.astype(x.dtype, copy=False), None),)
        yt = normalize(x, axes, eps)
        xc = sub(x, mean(x, axes, keepdims=True))
        inv_t = div(1.0, sqrt(add(mean(mul(xc, xc), axes, keepdims=True), eps)))
        inner = sub(sub(g, mean(g, axes, keepdims=True)),
                    mul(yt, mean(mul(g, yt), axes, keepdims=True)))
        return (mul(inv_t, inner),)

    return _make("normalize", y.astype(x.dtype, copy=False), (x,), vjp_fn)


def spatial_linear(x, matrix: sp.spmatrix, out_hw: tuple) -> Tensor:
    """Apply a sparse linear map over the flattened spatial dims of NCHW ``x``.

    ``matrix`` has shape (Ho*Wo, H*W). Used for bilinear resampling with a
    fixed sampling grid; the map is linear in ``x`` so its adjoint is the
    transposed matrix.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if matrix.shape[1] != h * w:
        raise _shape_error("spatial_linear", x.shape, matrix.shape)
    flat = x.data.reshape(n * c, h * w)
    out = np.asarray((matrix @ flat.T).T).astype(x.dtype, copy=False)
    out = out.reshape(n, c, out_hw[0], out_hw[1])
    mt = matrix.T.tocsr()
    return _make("spatial_linear", out, (x,),
                 lambda g, needs: (spatial_linear(g, mt, (h, w)),))


def batched_spatial_linear(x, matrices: Sequence[sp.spmatrix], out_hw: tuple) -> Tensor:
    """Per-sample variant of :func:`spatial_linear` (one matrix per batch item)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if len(matrices) != n:
        raise _shape_error("batched_spatial_linear", x.shape, (len(matrices),))
    outs = [np.asarray((m @ x.data[i].reshape(c, h * w).T).T) for i, m in enumerate(matrices)]
    out = np.stack(outs).astype(x.dtype, copy=False).reshape(n, c, out_hw[0], out_hw[1])
    mts = [m.T.tocsr() for m in matrices]
    return _make("batched_spatial_linear", out, (x,),
                 lambda g, needs: (batched_spatial_linear(g, mts, (h, w)),))


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(roots: Iterable[Node]) -> list:
    order, seen = [], set()
    for root in roots:
        if id(root) in seen:
            continue
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
            for p in node.parents:
                if p.node is not None and id(p.node) not in seen:
                    stack.append((p.node, False))
    return order


def vjp(output: Tensor, cotangent, wrt: Sequence[Tensor], retain_higher: bool = False) -> list:
    """Vector-Jacobian product ``cotangent^T d(output)/d(wrt)``.

    Returns one gradient Tensor per entry of ``wrt`` (zeros when ``output``
    does not depend on it). With ``retain_higher`` the gradients are tracked
    expressions that can be differentiated again.
    """
    if not isinstance(output, Tensor) or output.node is None:
        raise GraphError("vjp: output is not tracked")
    cot = as_tensor(cotangent, like=output)
    if cot.shape != output.shape:
        raise _shape_error("vjp", output.shape, cot.shape)
    wrt = list(wrt)
    for t in wrt:
        if not isinstance(t, Tensor) or t.node is None:
            raise GraphError("vjp: every wrt tensor must be tracked")

    with _enable_grad(retain_higher):
        targets = {id(t.node) for t in wrt}
        order = _topo_order([output.node])
        relevant = {}
        for node in order:
            relevant[id(node)] = id(node) in targets or any(
                p.node is not None and relevant.get(id(p.node), False) for p in node.parents
            )
        grads: dict = {id(output.node): cot}
        for node in reversed(order):
            g = grads.pop(id(node), None) if id(node) not in targets else grads.get(id(node))
            if g is None or node.vjp_fn is None:
                continue
            needs = tuple(p.node is not None and relevant.get(id(p.node), False) for p in node.parents)
            if not any(needs):
                continue
            parent_grads = node.vjp_fn(g, needs)
            for p, need, pg in zip(node.parents, needs, parent_grads):
                if not need or pg is None:
                    continue
                key = id(p.node)
                prev = grads.get(key)
                grads[key] = pg if prev is None else add(prev, pg)
        out = []
        for t in wrt:
            g = grads.get(id(t.node))
            if g is None:
                g = Tensor._wrap(np.zeros(t.shape, dtype=t.dtype), None)
            out.append(g)
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor], retain_higher: bool = False) -> list:
    """Gradient of a scalar ``loss`` with respect to each tensor in ``wrt``."""
    if not isinstance(loss, Tensor) or loss.node is None:
        raise GraphError("backward: loss is not tracked")
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    return vjp(loss, np.ones(loss.shape, dtype=loss.dtype), wrt, retain_higher)


backward = grad
