"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Operations are only recorded while a :class:`Tape` is active and at least one
input requires a gradient, so inference code runs on plain arrays with no
bookkeeping::

    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)          # w.grad == 2 * w.data
"""
from __future__ import annotations

import threading

import numpy as np
from scipy import sparse, special

from .errors import ConsumedTape, NonFinite, NonScalarLoss, ShapeMismatch

_state = threading.local()
_check_finite = False


def set_finite_check(enabled: bool) -> None:
    """Raise :class:`NonFinite` whenever an op produces NaN/inf."""
    global _check_finite
    _check_finite = bool(enabled)


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self.tape = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn):
    """Wrap ``data`` as an op output, registering it on the active tape."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFinite("operation produced a non-finite value")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        out.tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of differentiable operations; consumed by one backward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._previous = None

    def __enter__(self):
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._previous
        return False

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ConsumedTape("this tape was already consumed by a backward pass")
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.backward_fn is None:      # leaf: accumulate in place
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss.tape is None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        raise ConsumedTape("loss was not recorded on an active tape")
    loss.tape.backward(loss)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                              _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def reciprocal(a):
    a = as_tensor(a)
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    if b.ndim == 1:
        return _record(a.data @ b.data, (a, b),
                       lambda g: (np.outer(g, b.data) if a.requires_grad else None,
                                  a.data.T @ g if b.requires_grad else None))
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None))


def transpose(a):
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def scatter_rows(ids, values, n):
    """out[k] = sum of values[r] over rows r with ids[r] == k."""
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n)
    m = ids.shape[0]
    op = sparse.csr_matrix((np.ones(m), (ids, np.arange(m))), shape=(n, m))
    flat = values.reshape(m, -1)
    return np.asarray(op @ flat).reshape((n,) + values.shape[1:])


def take(a, index):
    """Basic or advanced indexing (slices, row gathers)."""
    a = as_tensor(a)
    row_gather = isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu"

    def back(g):
        if row_gather:
            return (scatter_rows(index, g, a.shape[0]),)
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), back)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- nonlinearities -------------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def expit(x):
    return special.expit(x)


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(a)), overflow-free."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record(out, (a,), lambda g: (g * expit(x),))


def silu(a):
    a = as_tensor(a)
    s = expit(a.data)
    out = a.data * s
    return _record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, slope * a.data), (a,),
                   lambda g: (np.where(pos, g, slope * g),))


def relu(a):
    return leaky_relu(a, 0.0)


def elu(a, alpha=1.0):
    a = as_tensor(a)
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    return _record(out, (a,), lambda g: (np.where(pos, g, g * (neg_part + alpha)),))


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        n = x.shape[-1]
        gx = g if gamma is None else g * gamma.data
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * np.sum(gx * xhat, axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        parents.append(beta)
    return _record(out, tuple(parents), back)


# -- segment (graph) operations ----------------------------------------------------

def _check_segments(values, segment_ids, n_segments):
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.ndim != 1 or segment_ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"segment ids {segment_ids.shape} vs values {values.shape}")
    if n_segments is None:
        n_segments = int(segment_ids.max()) + 1 if segment_ids.size else 0
    return segment_ids, n_segments


def segment_sum(values, segment_ids, n_segments=None):
    """Sum rows of ``values`` that share a segment id (scatter-add)."""
    values = as_tensor(values)
    ids, n = _check_segments(values.data, segment_ids, n_segments)
    out = scatter_rows(ids, values.data, n)
    return _record(out, (values,), lambda g: (g[ids],))


def edge_aggregate(values, weights, src, dst, n_nodes):
    """out[i] = sum over edges e with dst[e] == i of weights[e] * values[src[e]].

    The fused gather-scale-scatter of message passing, run as one sparse
    matrix product.
    """
    values, weights = as_tensor(values), as_tensor(weights)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if weights.ndim != 1 or weights.shape[0] != src.shape[0] or src.shape != dst.shape:
        raise ShapeMismatch("edge_aggregate: weights/src/dst must be equal-length vectors")
    op = sparse.csr_matrix((weights.data, (dst, src)), shape=(n_nodes, values.shape[0]))
    out = np.asarray(op @ values.data)

    def back(g):
        g_values = np.asarray(op.T @ g) if values.requires_grad else None
        g_weights = None
        if weights.requires_grad:
            g_weights = np.einsum("ij,ij->i", g[dst], values.data[src])
        return g_values, g_weights

    return _record(out, (values, weights), back)


def segment_softmax(values, segment_ids, n_segments=None):
    """Softmax of a 1-D score vector within each segment."""
    values = as_tensor(values)
    if values.ndim != 1:
        raise ShapeMismatch("segment_softmax expects a 1-D score vector")
    ids, n = _check_segments(values.data, segment_ids, n_segments)
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, ids, values.data)
    ex = np.exp(values.data - seg_max[ids])
    denom = np.bincount(ids, weights=ex, minlength=n)
    out = ex / denom[ids]

    def back(g):
        dot = np.bincount(ids, weights=g * out, minlength=n)
        return (out * (g - dot[ids]),)

    return _record(out, (values,), back)


def segment_mean(values, segment_ids, n_segments=None):
    values = as_tensor(values)
    ids, n = _check_segments(values.data, segment_ids, n_segments)
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    scale = (1.0 / np.maximum(counts, 1.0)).reshape((n,) + (1,) * (values.ndim - 1))
    return mul(segment_sum(values, ids, n), scale)


# -- optimizer ------------------------------------------------------------------

def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the ``params`` arrays.

    ``state`` is a dict carrying ``t`` and per-parameter moments; pass an empty
    dict on the first call.
    """
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)
