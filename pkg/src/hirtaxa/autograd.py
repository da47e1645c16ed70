"""Minimal reverse-mode differentiation over dense float64 arrays (rank <= 2).

Each operation returns a new :class:`Tensor` that remembers its inputs and
a closure mapping the output gradient to input gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order, accumulates ``.grad`` on every leaf that requires it,
and then frees the graph; a second call raises :class:`GraphReuse`.

Every forward value is checked for NaN/Inf and raises
:class:`NonFiniteError` naming the offending operation.
"""

from contextlib import contextmanager

import numpy as np

from .errors import DegenerateNorm, GraphReuse, NonFiniteError, ShapeMismatch

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ShapeMismatch(f"rank {self.data.ndim} tensors are not supported")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # graph traversal ----------------------------------------------------
    def backward(self, grad=None):
        if self._freed:
            raise GraphReuse("backward() called on a graph that was already consumed")
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# elementwise ------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, (a,), lambda g: (g / x,), "log")


def maximum_const(a, threshold):
    """``max(a, threshold)`` with ``threshold`` held constant.

    Entries strictly below the threshold are clamped and pass no gradient.
    """
    thr = np.asarray(threshold, dtype=np.float64)
    keep = a.data >= thr
    return _make(np.where(keep, a.data, thr), (a,), lambda g: (g * keep,), "maximum_const")


def maximum(a, b):
    """Elementwise max of two tensors; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
                 "maximum")


# linear algebra and reductions -------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a):
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def logsumexp(a, mask=None):
    """Row-wise ``log sum exp`` over entries where ``mask`` is true.

    Max-subtracted for stability.  Rows with no selected entry yield 0 and
    receive no gradient.  Returns shape ``(N,)``.
    """
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    has = mask.any(axis=1)
    xm = np.where(mask, x, -np.inf)
    mx = np.where(has, xm.max(axis=1, initial=-np.inf), 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, 0.0) - mx[:, None]), 0.0)
    tot = e.sum(axis=1)
    out = np.where(has, mx + np.log(np.where(has, tot, 1.0)), 0.0)
    soft = e / np.where(has, tot, 1.0)[:, None]
    return _make(out, (a,), lambda g: (g[:, None] * soft,), "logsumexp")


def masked_max(a, mask):
    """Max over entries selected by ``mask`` as a (1, 1) tensor.

    Gradient goes to the first maximal entry in row-major order.  An empty
    mask is an error; callers check for it.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("masked_max over an empty selection")
    flat = np.where(mask, a.data, -np.inf).ravel()
    k = int(np.argmax(flat))

    def back(g):
        out = np.zeros(a.data.size)
        out[k] = float(np.sum(g))
        return (out.reshape(a.shape),)

    return _make(np.array([[flat[k]]]), (a,), back, "masked_max")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def diag(a):
    """Main diagonal of a square matrix, shape ``(N,)``."""
    n = a.shape[0]

    def back(g):
        out = np.zeros(a.shape)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _make(np.diagonal(a.data).copy(), (a,), back, "diag")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def take_rows(table, idx):
    """Gather rows ``table[idx]``; gradient scatter-adds back into the table."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros(table.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), back, "take_rows")


def l2_normalize(a, eps=1e-12):
    """Row-wise unit normalization with the exact Jacobian ``(I - u u^T) / |x|``."""
    x = a.data
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    norms = np.sqrt((x2 * x2).sum(axis=1))
    if np.any(norms < eps):
        raise DegenerateNorm(f"cannot normalize a vector with norm {norms.min():.3g}")
    u = x2 / norms[:, None]

    def back(g):
        g2 = g[None, :] if single else g
        proj = g2 - u * (g2 * u).sum(axis=1, keepdims=True)
        res = proj / norms[:, None]
        return (res[0] if single else res,)

    return _make(u[0] if single else u, (a,), back, "l2_normalize")


def dropout(a, keep_mask, rate):
    """Inverted dropout with a caller-supplied keep mask."""
    if rate <= 0:
        return a
    factor = np.asarray(keep_mask, dtype=np.float64) / (1.0 - rate)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "dropout")


Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: (scale(self, other) if np.isscalar(other) else mul(self, other))
Tensor.__rmul__ = lambda self, other: (scale(self, other) if np.isscalar(other) else mul(other, self))
Tensor.__neg__ = neg
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.T = property(transpose)
Tensor.sum = sum_
Tensor.mean = mean
