"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 ndarray (0-d for scalars) and remembers how it was
produced. ``backward`` replays the recorded graph in reverse topological
order and accumulates gradients on every reachable node. The op set is
exactly what the forward model, the step-ratio penalty, and the probe-fixed
curvature estimator need; gradients here are validated against central
finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def item(self) -> float:
        return float(self.value)

    @property
    def shape(self):
        return self.value.shape


def constant(value) -> Var:
    return Var(value)


def leaf(value) -> Var:
    """Alias for a differentiable input; identical to constant structurally."""
    return Var(value)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return np.reshape(g, shape)


def add(a: Var, b: Var) -> Var:
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Var, b: Var) -> Var:
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)),
    )


def div(a: Var, b: Var) -> Var:
    return Var(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def matmul(a: Var, b: Var) -> Var:
    return Var(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda g: (g.T,))


def take(a: Var, index) -> Var:
    """Slice or index; gradient scatters back into a zero array."""

    def vjp(g):
        out = np.zeros_like(a.value)
        out[index] = g
        return (out,)

    return Var(a.value[index], (a,), vjp)


def vsum(a: Var) -> Var:
    return Var(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def vmean(a: Var) -> Var:
    n = a.value.size
    return Var(np.mean(a.value), (a,), lambda g: (np.broadcast_to(g / n, a.value.shape).copy(),))


def stddev(a: Var) -> Var:
    """Population standard deviation over all entries."""
    m = np.mean(a.value)
    centered = a.value - m
    sigma = float(np.sqrt(np.mean(centered * centered)))

    def vjp(g):
        denom = max(sigma, 1e-300) * a.value.size
        return (g * centered / denom,)

    return Var(sigma, (a,), vjp)


def sqrt(a: Var) -> Var:
    root = np.sqrt(a.value)

    def vjp(g):
        return (g * 0.5 / np.maximum(root, 1e-300),)

    return Var(root, (a,), vjp)


def log(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def softplus(a: Var) -> Var:
    out = np.logaddexp(0.0, a.value)

    def vjp(g):
        # d/dx ln(1+e^x) = sigmoid(x); exp(-|x|) keeps both branches in (0, 1]
        decay = np.exp(-np.abs(a.value))
        sig = np.where(a.value >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
        return (g * sig,)

    return Var(out, (a,), vjp)


def maximum(a: Var, floor: float) -> Var:
    """Elementwise max with a constant; gradient flows only where a > floor."""
    mask = a.value > floor
    return Var(np.maximum(a.value, floor), (a,), lambda g: (g * mask,))


def frobnorm(a: Var) -> Var:
    norm = float(np.sqrt(np.sum(a.value * a.value)))

    def vjp(g):
        return (g * a.value / max(norm, 1e-300),)

    return Var(norm, (a,), vjp)


def frob_inner(a: Var, b: Var) -> Var:
    return Var(
        np.sum(a.value * b.value),
        (a, b),
        lambda g: (g * b.value, g * a.value),
    )


def rowscale(gains: Var, m: Var) -> Var:
    """diag(gains) @ m for a 1-D gains vector: scales row i by gains[i]."""
    return Var(
        gains.value[:, np.newaxis] * m.value,
        (gains, m),
        lambda g: (np.sum(g * m.value, axis=1), gains.value[:, np.newaxis] * g),
    )


def logsumexp(a: Var) -> Var:
    hi = np.max(a.value)
    shifted = np.exp(a.value - hi)
    total = np.sum(shifted)

    def vjp(g):
        return (g * shifted / total,)

    return Var(hi + np.log(total), (a,), vjp)


def backward(root: Var, seed: float = 1.0) -> None:
    """Accumulate d(root)/d(node) into .grad for every node reachable from root."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        node.grad = None
    root.grad = np.asarray(float(seed))
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


def zero_grads(vars_: list[Var]) -> None:
    for v in vars_:
        v.grad = None
