"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op works on the trailing axes, so the same code handles a single
patch ``[n, c]`` and a stack of patches ``[B, n, c]``.  Points live on
axis -2 and channels on axis -1 throughout.
"""

import numpy as np


class GraphError(ValueError):
    """Raised when an op is applied to incompatible shapes."""


class NumericDegeneracyError(ArithmeticError):
    """Raised when a normalization would divide by (nearly) zero."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), op="", requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _node(value, parents, op, backward_fn):
    out = Tensor(value, parents, op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.backward_fn = backward_fn
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise GraphError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), "add", bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), "sub", bw)


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), "neg", lambda g: _accumulate(a, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), "mul", bw)


def rowscale(x, w):
    """Scale each row of ``x [..., n, c]`` by ``w [..., n, 1]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.shape[-1] != 1 or w.shape[-2] != x.shape[-2]:
        raise GraphError(f"rowscale: weights {w.shape} do not match rows of {x.shape}")
    return mul(x, w)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.value, b.shape))

    return _node(out, (a, b), "div", bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)
    return _node(out, (x,), "exp", lambda g: _accumulate(x, g * out))


def sigmoid(x):
    x = as_tensor(x)
    v = x.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (x,), "sigmoid", lambda g: _accumulate(x, g * out * (1.0 - out)))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    factor = np.where(x.value > 0, 1.0, slope)
    out = x.value * factor
    return _node(out, (x,), "leaky_relu", lambda g: _accumulate(x, g * factor))


def minimum(a, b):
    """Element-wise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.value <= b.value

    def bw(g):
        _accumulate(a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        _accumulate(b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.minimum(a.value, b.value), (a, b), "minimum", bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.value.ndim > 1 else 0]:
        raise GraphError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _node(a.value @ b.value, (a, b), "matmul", bw)


def affine(x, W, b):
    """``x @ W + b`` along the channel axis; W is ``[c_in, c_out]``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise GraphError(f"affine: x {x.shape}, W {W.shape}, b {b.shape}")
    c_in, c_out = W.shape

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ W.value.T)
        if W.requires_grad:
            _accumulate(W, x.value.reshape(-1, c_in).T @ g.reshape(-1, c_out))
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, c_out).sum(axis=0))

    return _node(x.value @ W.value + b.value, (x, W, b), "affine", bw)


def affine_multi(inputs, W, b):
    """``concat(inputs, axis=-1) @ W + b`` without building the concatenation.

    Inputs with a single row broadcast over the row count of the others,
    which is how a pooled summary gets joined to every retained point.
    """
    inputs = [as_tensor(t) for t in inputs]
    W, b = as_tensor(W), as_tensor(b)
    widths = [t.shape[-1] for t in inputs]
    if W.value.ndim != 2 or sum(widths) != W.shape[0] or b.shape != (W.shape[1],):
        raise GraphError(f"affine_multi: inputs {[t.shape for t in inputs]}, W {W.shape}, b {b.shape}")
    c_out = W.shape[1]
    bounds = np.concatenate(([0], np.cumsum(widths)))
    blocks = [W.value[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    out = b.value
    for t, Wi in zip(inputs, blocks):
        out = out + t.value @ Wi
    rows = out.shape[-2]

    def bw(g):
        gW = np.zeros_like(W.value) if W.requires_grad else None
        for t, Wi, lo, hi in zip(inputs, blocks, bounds[:-1], bounds[1:]):
            gt = g
            if t.shape[-2] == 1 and rows != 1:
                gt = g.sum(axis=-2, keepdims=True)
            if t.requires_grad:
                _accumulate(t, _unbroadcast(gt @ Wi.T, t.shape))
            if gW is not None:
                gW[lo:hi] = t.value.reshape(-1, hi - lo).T @ gt.reshape(-1, c_out)
        if gW is not None:
            _accumulate(W, gW)
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, c_out).sum(axis=0))

    return _node(out, (*inputs, W, b), "affine_multi", bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _node(out, tuple(tensors), "concat", bw)


def concat_channels(a, b):
    return concat([a, b], axis=-1)


def prefix(x, m):
    """First ``m`` rows (points axis) without reordering."""
    x = as_tensor(x)
    n = x.shape[-2]
    if not 0 <= m <= n:
        raise GraphError(f"prefix: cannot take {m} of {n} rows")

    def bw(g):
        full = np.zeros_like(x.value)
        full[..., :m, :] = g
        _accumulate(x, full)

    return _node(x.value[..., :m, :], (x,), "prefix", bw)


def broadcast_row(r, n):
    """Repeat a pooled ``[..., 1, c]`` row ``n`` times."""
    r = as_tensor(r)
    if r.shape[-2] != 1:
        raise GraphError(f"broadcast_row: expected a single row, got {r.shape}")
    shape = r.shape[:-2] + (n, r.shape[-1])
    return _node(np.broadcast_to(r.value, shape), (r,), "broadcast_row",
                 lambda g: _accumulate(r, g.sum(axis=-2, keepdims=True)))


def gather_rows(x, idx):
    """``x [..., n, c]`` indexed by ``idx [..., n, k]`` -> ``[..., n, k, c]``."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.value.ndim == 2:
        out = x.value[idx]
    else:
        batch = np.arange(x.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
        out = x.value[batch, idx]

    def bw(g):
        full = np.zeros_like(x.value)
        if x.value.ndim == 2:
            np.add.at(full, idx, g)
        else:
            np.add.at(full, (batch, idx), g)
        _accumulate(x, full)

    return _node(out, (x,), "gather_rows", bw)


def maxpool_points(x, axis=-2):
    """Max over the points axis.

    Returns the pooled tensor (axis kept with length 1) and the argmax
    indices.  The gradient of each channel flows only to its argmax row;
    ``np.argmax`` picks the first occurrence, so ties go to the lowest row.
    """
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise GraphError("maxpool_points: no rows to pool")
    arg = np.expand_dims(np.argmax(x.value, axis=axis), axis)
    out = np.take_along_axis(x.value, arg, axis=axis)

    def bw(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, arg, g, axis=axis)
        _accumulate(x, full)

    return _node(out, (x,), "maxpool", bw), np.squeeze(arg, axis=axis)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    x = as_tensor(x)
    return _node(np.array(x.value.sum()), (x,), "sum_all",
                 lambda g: _accumulate(x, np.broadcast_to(g, x.shape).copy()))


def mean_all(x):
    x = as_tensor(x)
    n = x.value.size
    return _node(np.array(x.value.mean()), (x,), "mean_all",
                 lambda g: _accumulate(x, np.full(x.shape, g / n)))


def reduce_sum(x, axis, keepdims=True):
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(out, (x,), "reduce_sum", bw)


def reduce_mean(x, axis, keepdims=True):
    x = as_tensor(x)
    n = x.shape[axis]
    out = x.value.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape).copy())

    return _node(out, (x,), "reduce_mean", bw)


# ---------------------------------------------------------------------------
# vector geometry and normalization


def cross(a, b):
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise GraphError(f"cross: {a.shape} x {b.shape}")
    _broadcast_shape(a, b, "cross")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.cross(b.value, g), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.cross(g, a.value), b.shape))

    return _node(np.cross(a.value, b.value), (a, b), "cross", bw)


def norm(x, axis=-1):
    """Euclidean norm along ``axis`` (kept).  Subgradient 0 at the origin."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.value * x.value, axis=axis, keepdims=True))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        _accumulate(x, np.where(out > 0, g * x.value / safe, 0.0))

    return _node(out, (x,), "norm", bw)


def normalize(x, axis=-1, min_norm=1e-12):
    x = as_tensor(x)
    length = norm(x, axis=axis)
    if np.any(length.value < min_norm):
        raise NumericDegeneracyError(
            f"cannot normalize: norm {length.value.min():.3g} below {min_norm:g}")
    return div(x, length)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return _node(out, (x,), "softmax", bw)


def standardize(x, axis=-2, eps=1e-5):
    """Zero-mean, unit-variance features along the points axis."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise GraphError("standardize: empty axis")
    centered = x.value - x.value.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=axis, keepdims=True) + eps)
    out = centered * inv_std

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        _accumulate(x, inv_std * (g - gm - out * gxm))

    return _node(out, (x,), "standardize", bw)


# ---------------------------------------------------------------------------
# graph traversal


def _topological_order(root):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, retain_grads=False):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients are released afterwards unless ``retain_grads``;
    leaf gradients add on top of whatever is already there, so repeated
    calls sum over patches.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if not retain_grads:
                node.grad = None
