"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Var`` wraps an ndarray and records, for every derived value, the parent
variables together with vector-Jacobian callbacks.  Calling ``backward()`` on
a scalar output walks the tape once in reverse topological order and
accumulates gradients into ``.grad``.  Only the handful of operations needed
for small feed-forward drift networks and their regression losses are
implemented; everything runs in float64.

All operations are pure with respect to the wrapped values: a tape never
mutates its inputs, so the same ``Var`` can appear in many expressions.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Var", "as_var", "concat"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node in the differentiation tape.

    Parameters
    ----------
    value : array_like
        Wrapped value, stored as a float64 ndarray (0-d for scalars).
    parents : sequence of (Var, callable)
        Each callable maps the output cotangent to the parent cotangent.
    """

    __slots__ = ("value", "grad", "_parents")

    # defer mixed ndarray-op-Var expressions to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    # -- graph construction -------------------------------------------------

    def __add__(self, other):
        o = as_var(other)
        return Var(
            self.value + o.value,
            [
                (self, lambda g, s=self.value.shape: _unbroadcast(g, s)),
                (o, lambda g, s=o.value.shape: _unbroadcast(g, s)),
            ],
        )

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        o = as_var(other)
        return Var(
            self.value * o.value,
            [
                (self, lambda g, ov=o.value, s=self.value.shape: _unbroadcast(g * ov, s)),
                (o, lambda g, sv=self.value, s=o.value.shape: _unbroadcast(g * sv, s)),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_var(other)
        return Var(
            self.value / o.value,
            [
                (self, lambda g, ov=o.value, s=self.value.shape: _unbroadcast(g / ov, s)),
                (o, lambda g, sv=self.value, ov=o.value, s=o.value.shape: _unbroadcast(
                    -g * sv / (ov * ov), s)),
            ],
        )

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return Var(
            self.value ** exponent,
            [(self, lambda g, v=self.value, p=exponent: g * p * v ** (p - 1))],
        )

    def __matmul__(self, other):
        o = as_var(other)
        return Var(
            self.value @ o.value,
            [
                (self, lambda g, ov=o.value: g @ ov.T),
                (o, lambda g, sv=self.value: sv.T @ g),
            ],
        )

    def __rmatmul__(self, other):
        return as_var(other) @ self

    def __getitem__(self, key):
        def vjp(g, key=key, shape=self.value.shape):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out

        return Var(self.value[key], [(self, vjp)])

    def reshape(self, *shape):
        return Var(
            self.value.reshape(*shape),
            [(self, lambda g, s=self.value.shape: g.reshape(s))],
        )

    def sum(self, axis=None):
        def vjp(g, axis=axis, shape=self.value.shape):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Var(self.value.sum(axis=axis), [(self, vjp)])

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def tanh(self):
        t = np.tanh(self.value)
        return Var(t, [(self, lambda g, t=t: g * (1.0 - t * t))])

    def silu(self):
        s = 0.5 + 0.5 * np.tanh(0.5 * self.value)  # overflow-safe sigmoid
        out = self.value * s
        # d/dx x*sigmoid(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
        return Var(out, [(self, lambda g, v=self.value, s=s: g * s * (1.0 + v * (1.0 - s)))])

    def exp(self):
        e = np.exp(self.value)
        return Var(e, [(self, lambda g, e=e: g * e)])

    # -- reverse pass --------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be scalar (0-d or size 1).
        """
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
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
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def concat(vars_, axis=0) -> Var:
    """Concatenate Vars along an axis."""
    vars_ = [as_var(v) for v in vars_]
    values = [v.value for v in vars_]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for v, lo, hi in zip(vars_, offsets[:-1], offsets[1:]):
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(lo, hi)

        def vjp(g, idx=tuple(idx)):
            return g[idx]

        parents.append((v, vjp))
    return Var(out, parents)
