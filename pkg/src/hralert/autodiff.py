"""A small dense reverse-mode autodiff engine over float64 numpy arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients.  Node ids grow monotonically, so sorting the reachable nodes
by descending id is a valid reverse topological order.
"""

import itertools

import numpy as np

from . import _kernels

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class DiffArray:
    """Dense array that can take part in reverse-mode differentiation.

    ``grad`` exists only for tracked arrays.  Leaves created with
    ``requires_grad=True`` accumulate into it on every :func:`backward`.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward", "_freed")
    __array_priority__ = 100

    def __init__(self, values, requires_grad=False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def numpy(self):
        return self.values

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_diff(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def parameter(values):
    return DiffArray(values, requires_grad=True)


class no_grad:
    """Context manager: ops inside record nothing, for inference."""

    depth = 0

    def __enter__(self):
        no_grad.depth += 1
        return self

    def __exit__(self, *exc):
        no_grad.depth -= 1
        return False


def _make(values, parents, backward):
    out = DiffArray.__new__(DiffArray)
    out.values = values
    out.node_id = next(_ids)
    out._freed = False
    out.grad = None
    if not no_grad.depth and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_diff(a), as_diff(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_diff(a), as_diff(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_diff(a), as_diff(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def relu(x):
    x = as_diff(x)
    pos = x.values > 0
    return _make(np.where(pos, x.values, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_diff(x)
    s = _sigmoid(np.atleast_1d(x.values)).reshape(x.shape)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x):
    """Softmax over the last axis."""
    x = as_diff(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    x = as_diff(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, eps=1e-5):
    """Normalise the last axis with population variance; no affine terms."""
    x = as_diff(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), backward)


def dropout(x, rate, rng=None, training=False):
    """Inverted dropout; the identity unless ``training``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_diff(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.values * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not align")
    try:
        out = av @ bv
    except ValueError:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not broadcast") from None

    def backward(g):
        a2 = av if av.ndim > 1 else av[None, :]
        b2 = bv if bv.ndim > 1 else bv[:, None]
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def concat(xs, axis=-1):
    xs = [as_diff(x) for x in xs]
    vals = [x.values for x in xs]
    ref = vals[0]
    ax = axis % ref.ndim
    for v in vals[1:]:
        if v.ndim != ref.ndim or any(v.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    out = np.concatenate(vals, axis=ax)
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack_rows(xs):
    """Stack ``[..., d]`` arrays along a new second-to-last axis."""
    xs = [as_diff(x) for x in xs]
    return concat([reshape(x, x.shape[:-1] + (1, x.shape[-1])) for x in xs], axis=-2)


def reshape(x, shape):
    x = as_diff(x)
    old = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a, b):
    x = as_diff(x)
    return _make(np.swapaxes(x.values, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def broadcast_to(x, shape):
    x = as_diff(x)
    old = x.shape
    return _make(np.broadcast_to(x.values, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x, key):
    x = as_diff(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(x.values[key]), (x,), backward)


def sum_(x, axis=None, keepdims=False):
    x = as_diff(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.values.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_diff(x)
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# index ops
# ---------------------------------------------------------------------------

def _check_index(index, n, op):
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows "
                         f"(min {index.min()}, max {index.max()})")
    return index


def embedding(table, index):
    """Row lookup ``table[index]``; the gradient scatters back into the table."""
    table = as_diff(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    index = _check_index(index, table.shape[0], "embedding")
    shape = table.shape
    flat = index.reshape(-1)

    def backward(g):
        full = np.zeros(shape)
        _kernels.scatter_add(full, flat, g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.values[index], (table,), backward)


def scatter_add(rows, index, num_rows=None, into=None):
    """Add message rows into destination rows.

    Accumulation runs in ascending message order.  Passing the result of an
    earlier call as ``into`` continues that same sequence, so feeding messages
    in consecutive chunks reproduces the unchunked result bit for bit.
    """
    rows = as_diff(rows)
    if rows.ndim != 2:
        raise ShapeError(f"scatter_add: rows must be 2-D, got {rows.shape}")
    if into is None:
        if num_rows is None:
            raise ValueError("scatter_add needs num_rows or into")
        into = DiffArray(np.zeros((num_rows, rows.shape[1])))
    into = as_diff(into)
    if into.ndim != 2 or into.shape[1] != rows.shape[1]:
        raise ShapeError(f"scatter_add: rows {rows.shape} do not fit destination {into.shape}")
    index = _check_index(index, into.shape[0], "scatter_add")
    if index.shape != (rows.shape[0],):
        raise ShapeError(f"scatter_add: {index.shape[0]} indices for {rows.shape[0]} rows")
    out = into.values.copy()
    _kernels.scatter_add(out, index, rows.values)
    return _make(out, (into, rows), lambda g: (g, g[index]))


def qualifier_distmult(key_table, value_table, pad, count):
    """Row ``e``: ``sum_{j < count[e]} key_table[pad[e,j,0]] * value_table[pad[e,j,1]]``.

    Slots at or beyond ``count[e]`` are never read, so padding width and the
    sentinel value are irrelevant to the result.
    """
    key_table, value_table = as_diff(key_table), as_diff(value_table)
    pad = np.asarray(pad, dtype=np.int64)
    count = np.asarray(count, dtype=np.int64)
    if pad.ndim != 3 or pad.shape[2] != 2 or count.shape != (pad.shape[0],):
        raise ShapeError(f"qualifier_distmult: pad {pad.shape} / count {count.shape} malformed")
    if count.size and (count.min() < 0 or count.max() > pad.shape[1]):
        raise IndexError("qualifier_distmult: count exceeds padding width")
    valid = np.arange(pad.shape[1])[None, :] < count[:, None]
    _check_index(pad[..., 0][valid], key_table.shape[0], "qualifier_distmult keys")
    _check_index(pad[..., 1][valid], value_table.shape[0], "qualifier_distmult values")
    kv, vv = key_table.values, value_table.values
    out = _kernels.distmult_sum(kv, vv, pad, count)

    def backward(g):
        gk = np.zeros_like(kv)
        gv = np.zeros_like(vv)
        _kernels.distmult_backward(g, kv, vv, pad, count, gk, gv)
        return gk, gv

    return _make(out, (key_table, value_table), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` rows."""
    logits = as_diff(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    _check_index(targets, logits.shape[1], "cross_entropy")
    picked = getitem(log_softmax(logits), (np.arange(targets.size), targets))
    return mul(mean(picked), -1.0)


def margin_ranking(pos, neg, margin):
    """Elementwise ``max(0, margin - pos + neg)``."""
    return relu(add(sub(neg, pos), margin))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every tracked leaf, then free the graph."""
    if not isinstance(loss, DiffArray):
        raise TypeError("backward expects a DiffArray")
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("graph already freed by an earlier backward()")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = loss.grad + np.ones_like(loss.values)
        return

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {loss.node_id: np.ones_like(loss.values)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg

    for node in nodes.values():
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._freed = True
