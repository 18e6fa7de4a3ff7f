"""A small numpy-backed reverse-mode autodiff engine.

Only the operations a toy transformer needs are provided.  Every op builds its
output eagerly and, when any input requires a gradient, attaches a closure that
maps the output gradient to input gradients.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import GraphError, ShapeError

_state = threading.local()


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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise GraphError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mul(sum_all(self), 1.0 / self.size)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", f"implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise GraphError(f"node produced by {node.op!r} has no backward rule")
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(node.op, f"gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _toposort(root):
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at node {node.op!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError(f"cycle detected at node {p.op!r}")
            if ps is None:
                stack.append((p, False))
    return order


def _lift(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a.dtype)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a):
    """tanh-approximated GELU."""
    out, deriv = _kernels.gelu(np.ascontiguousarray(a.data).reshape(-1))
    out = out.reshape(a.shape)
    deriv = deriv.reshape(a.shape)
    return _make(out, (a,), lambda g: (g * deriv,), "gelu")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def sum_all(a):
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"bad axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index):
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("getitem", str(exc)) from None

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def scatter_rows(a, rows, n_rows):
    """Place the rows of ``a`` at positions ``rows`` of a zero [n_rows, ...] array."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 1 or len(rows) != a.shape[0]:
        raise ShapeError("scatter_rows", f"{len(rows)} row ids for {a.shape[0]} rows")
    out = np.zeros((n_rows,) + a.shape[1:], dtype=a.dtype)
    out[rows] = a.data
    return _make(out, (a,), lambda g: (g[rows],), "scatter_rows")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError("matmul", str(exc)) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` (broadcastable bool, True = keep) zeroes entries."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layernorm(x, gain, bias, eps=1e-5):
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm", f"gain/bias {gain.shape}/{bias.shape} for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = rstd / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layernorm")


def embedding(table, ids):
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", f"ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]
    flat = ids.reshape(-1).astype(np.int64)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, table.shape[1]))
        return (_kernels.embedding_backward(flat, g2, table.shape[0]),)

    return _make(out, (table,), backward, "embedding")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be [N, V], got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"{targets.shape[0] if targets.ndim else 0} targets for {logits.shape[0]} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy", "target id out of range")
    nll, dlogits = _kernels.softmax_xent(np.ascontiguousarray(logits.data), targets)
    n = len(targets)
    out = np.asarray(nll.mean())

    def backward(g):
        return (dlogits * (g / n),)

    return _make(out, (logits,), backward, "cross_entropy")


def topk_gate(logits, k):
    """Sparse gate: keep the top-k logits per row and softmax over just those.

    Returns a dense [N, E] weight tensor (zeros off the selected experts) and the
    [N, k] selected expert ids.  Unselected logits receive zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError("topk_gate", f"logits must be [N, E], got {logits.shape}")
    n, e = logits.shape
    if not 1 <= k <= e:
        raise ShapeError("topk_gate", f"k={k} outside [1, {e}]")
    idx, w = _kernels.topk_route(np.ascontiguousarray(logits.data), k)
    dense = np.zeros_like(logits.data)
    rows = np.arange(n)[:, None]
    dense[rows, idx] = w

    def backward(g):
        gs = g[rows, idx]
        inner = (gs * w).sum(axis=1, keepdims=True)
        out = np.zeros_like(logits.data)
        out[rows, idx] = w * (gs - inner)
        return (out,)

    return _make(dense, (logits,), backward, "topk_gate"), idx
