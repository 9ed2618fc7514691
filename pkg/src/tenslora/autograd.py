"""Small define-by-run reverse-mode autodiff over numpy arrays.

Every operation returns a new :class:`Variable`.  When at least one input
requires gradients the output remembers its inputs and a backward rule; the
graph is rebuilt on every forward pass and walked once by :func:`backward`.

Only the handful of operations needed to push a Tucker-factorized adapter
through a transformer encoder are provided.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Variable",
    "variable",
    "constant",
    "topological_order",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "index",
    "sum",
    "mean",
    "concat",
    "stack",
    "mode_n_product",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding_lookup",
    "cross_entropy",
    "finite_diff_check",
]


class Variable:
    """A value in the computation graph.

    ``grad`` is allocated on the first backward pass that reaches this
    variable and accumulates over later passes until :func:`zero_grad`.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None, op=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        return f"Variable(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by a Python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def variable(value, requires_grad: bool = True) -> Variable:
    """Trainable leaf (copies ``value``)."""
    return Variable(np.array(value, dtype=np.float64), requires_grad=requires_grad)


def constant(value) -> Variable:
    return Variable(value, requires_grad=False)


def _as_var(x) -> Variable:
    return x if isinstance(x, Variable) else constant(x)


def _node(value, parents: Sequence[Variable], backward_fn: Callable, op: str) -> Variable:
    if any(p.requires_grad for p in parents):
        return Variable(value, True, parents, backward_fn, op)
    return Variable(value, False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# graph traversal


def topological_order(loss: Variable) -> list:
    """Nodes reachable from ``loss`` that require gradients, inputs first."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Variable, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf
    that requires gradients.  ``loss`` must be a scalar."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.value) if grad is None else np.asarray(grad, dtype=np.float64)
    grads = {id(loss): seed}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Sequence[Variable]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Variable:
    a, b = _as_var(a), _as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Variable:
    a, b = _as_var(a), _as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Variable:
    a, b = _as_var(a), _as_var(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), bw, "mul")


def scale(x, c: float) -> Variable:
    x = _as_var(x)
    c = float(c)
    return _node(c * x.value, (x,), lambda g: (c * g,), "scale")


def matmul(a, b) -> Variable:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_var(a), _as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.value @ b.value, (a, b), bw, "matmul")


def reshape(x, shape) -> Variable:
    x = _as_var(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Variable:
    x = _as_var(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def index(x, key) -> Variable:
    x = _as_var(x)

    def bw(g):
        out = np.zeros_like(x.value)
        np.add.at(out, key, g)
        return (out,)

    return _node(x.value[key], (x,), bw, "index")


def sum(x, axis=None, keepdims: bool = False) -> Variable:  # noqa: A001
    x = _as_var(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(x.value.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Variable:
    x = _as_var(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(xs: Sequence[Variable], axis: int = 0) -> Variable:
    xs = [_as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([x.value for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Variable], axis: int = 0) -> Variable:
    xs = [_as_var(x) for x in xs]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([x.value for x in xs], axis=axis), xs, bw, "stack")


def mode_n_product(x, m, mode: int) -> Variable:
    """``x x_mode m`` with ``m`` of shape ``(k, x.shape[mode])``."""
    x, m = _as_var(x), _as_var(m)
    if not 0 <= mode < x.ndim:
        raise IndexError(f"mode {mode} out of range for an order-{x.ndim} tensor")
    if m.ndim != 2 or m.shape[1] != x.shape[mode]:
        raise ValueError(f"matrix of shape {m.shape} cannot act on mode {mode} of size {x.shape[mode]}")
    out = np.moveaxis(np.tensordot(m.value, x.value, axes=([1], [mode])), 0, mode)

    def bw(g):
        gx = gm = None
        if x.requires_grad:
            gx = np.moveaxis(np.tensordot(m.value, g, axes=([0], [mode])), 0, mode)
        if m.requires_grad:
            other = [a for a in range(x.ndim) if a != mode]
            gm = np.tensordot(g, x.value, axes=(other, other))
        return gx, gm

    return _node(np.ascontiguousarray(out), (x, m), bw, "mode_n_product")


# --------------------------------------------------------------------------
# network ops


def softmax(x, axis: int = -1) -> Variable:
    x = _as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), bw, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Variable:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = _as_var(x), _as_var(gamma), _as_var(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.value.var(axis=-1, keepdims=True) + eps)
    xhat = (x.value - mu) * inv

    def bw(g):
        dxhat = g * gamma.value
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            gx,
            _unbroadcast(g * xhat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _node(xhat * gamma.value + beta.value, (x, gamma, beta), bw, "layer_norm")


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Variable:
    """Exact GELU, ``x * Phi(x)``."""
    x = _as_var(x)
    cdf = 0.5 * (1.0 + erf(x.value * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.value**2)
        return (g * (cdf + x.value * pdf),)

    return _node(x.value * cdf, (x,), bw, "gelu")


def embedding_lookup(table, ids) -> Variable:
    """Rows of ``table`` selected by integer array ``ids``."""
    table = _as_var(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for a table of {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _node(table.value[ids], (table,), bw, "embedding")


def cross_entropy(logits, labels) -> Variable:
    """Mean softmax cross-entropy of ``logits`` (batch, classes) against
    integer ``labels``; log-softmax is computed in the stable form."""
    logits = _as_var(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects logits of shape (batch, classes)")
    n, c = logits.shape
    if c < 1:
        raise ValueError("cross_entropy needs a positive class count")
    if labels.shape != (n,):
        raise ValueError(f"labels of shape {labels.shape} do not match batch size {n}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _node(loss, (logits,), bw, "cross_entropy")


# --------------------------------------------------------------------------
# verification


def finite_diff_check(
    f: Callable[[Sequence[Variable]], Variable],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` maps a list of Variables (one per array in ``params``) to a scalar
    Variable.  Up to ``max_coords`` coordinates per parameter are sampled
    (all of them by default).  Returns the largest
    ``|analytic - numeric| / max(1e-12, |analytic| + |numeric|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    leaves = [variable(p) for p in params]
    loss = f(leaves)
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("function value is not finite")
    backward(loss)
    analytic = [np.zeros_like(p) if v.grad is None else v.grad for p, v in zip(params, leaves)]

    def value():
        out = float(f([constant(p) for p in params]).value)
        if not math.isfinite(out):
            raise FloatingPointError("function value is not finite")
        return out

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat, gflat = p.reshape(-1), grad.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            up = value()
            flat[i] = old - h
            down = value()
            flat[i] = old
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(1e-12, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return float(worst)
