"""Minimal reverse-mode automatic differentiation over float64 arrays.

A dynamic tape: every operation records its parent tensors and a closure
mapping the output gradient to per-parent gradients.  Graphs are rebuilt
on every step, so variable sequence lengths cost nothing.  Everything is
64-bit; gradient checks and KL identities need the headroom and speed is
a non-issue at desk scale.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, GraphError, NumericError

__all__ = [
    "Tensor",
    "ParamStore",
    "backward",
    "grad_check",
    "sgd_step",
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "gather_rows",
    "select_last",
    "tsum",
    "tmean",
    "reshape",
    "stop_gradient",
]


class Tensor:
    """Dense float64 array participating in a differentiable graph.

    Immutable after creation except for the ``grad`` buffer (and the
    sanctioned in-place parameter update between passes).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    @property
    def _tracked(self):
        return self.requires_grad or self._backward is not None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(_as_tensor(other), -1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if any(p._tracked for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# primitives ---------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p
    return _result(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes.

    Both operands must have rank >= 2 so the backward pass stays simple.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractViolation("matmul operands must have rank >= 2")

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), bw)


def sigmoid(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # exp(-x) -> inf is a clean 0
        data = 1.0 / (1.0 + np.exp(-a.data))
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),))


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)
    return _result(data, (a,), lambda g: (g * (1.0 - data * data),))


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a):
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a):
    """log(1 + exp(x)), evaluated stably."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _result(data, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


def softmax(a):
    """Softmax over the last axis, shift-stable."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result(data, (a,), bw)


def log_softmax(a):
    """log softmax over the last axis, shift-stable."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(data, (a,), bw)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def gather_rows(table, indices):
    """Row lookup (embedding): out[..., :] = table[indices[...], :]."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _result(table.data[idx], (table,), bw)


def select_last(a, indices):
    """Pick one entry along the last axis of a 2-D tensor: out[i] = a[i, idx[i]]."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("select_last expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _result(a.data[rows, idx], (a,), bw)


def getitem(a, key):
    """Basic (slice/int) indexing; each source element selected at most once."""
    a = _as_tensor(a)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _result(a.data[key], (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _result(data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def stop_gradient(a):
    """Identity forward, zero backward: the sg() of the commitment term."""
    a = _as_tensor(a)
    return Tensor(a.data)


# engine -------------------------------------------------------------

def backward(loss):
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively; tensors used twice receive both
    contributions.  Constants are untouched.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward needs a Tensor loss")
    if loss.data.size != 1:
        raise ContractViolation("loss must be scalar")

    topo = []
    visited = set()
    work = [(loss, False)]
    while work:
        node, done = work.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        work.append((node, True))
        for parent in node._parents:
            if not isinstance(parent, Tensor):
                raise GraphError("foreign object wired into the graph")
            if id(parent) not in visited:
                work.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            contrib = np.asarray(g, dtype=np.float64).reshape(node.data.shape)
            node.grad = contrib.copy() if node.grad is None else node.grad + contrib
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent._tracked:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class ParamStore:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, value, requires_grad=True):
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def copy_arrays(self):
        """Snapshot of all parameter values (detached)."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays):
        for name, t in self._params.items():
            t.data = np.array(arrays[name], dtype=np.float64).reshape(t.data.shape)


def sgd_step(params, lr):
    """p <- p - lr * grad for every requires_grad parameter; grads zeroed."""
    if lr <= 0:
        raise ContractViolation("lr must be positive")
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractViolation(f"parameter {name!r} has no gradient")
        p.data = p.data - lr * p.grad
        p.grad = None


def grad_check(f, params, eps=1e-5):
    """Compare backward grads of ``f(params)`` against central differences.

    Returns {name: max relative error}, with relative error defined as
    |a - b| / max(|a|, |b|, 1e-8).  ``f`` must be deterministic.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    params.zero_grads()
    base = f(params)
    if not np.isfinite(base.data).all():
        raise NumericError("non-finite function value in grad_check")
    backward(base)

    report = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = f(params).item()
            flat[i] = saved - eps
            fm = f(params).item()
            flat[i] = saved
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite function value in grad_check")
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report[name] = worst
    params.zero_grads()
    return report
