"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations needed by the unfolded MRF layers are provided. Gradients
of broadcast operands are summed back to the operand's shape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit, logsumexp


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, parents=(), requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # sequence of (Tensor, backward fn)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor({self.value!r})"

    def _make(self, value, parents):
        parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
        return Tensor(value, parents)

    # arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        return self._make(self.value + other.value, [
            (self, lambda g: _unbroadcast(g, self.shape)),
            (other, lambda g: _unbroadcast(g, other.shape)),
        ])

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        return self._make(a * b, [
            (self, lambda g: _unbroadcast(g * b, self.shape)),
            (other, lambda g: _unbroadcast(g * a, other.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        return self._make(a / b, [
            (self, lambda g: _unbroadcast(g / b, self.shape)),
            (other, lambda g: _unbroadcast(-g * a / (b * b), other.shape)),
        ])

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.value, other.value
        if b.ndim != 2:
            raise ValueError("right matmul operand must be 2-D")
        return self._make(a @ b, [
            (self, lambda g: g @ b.T),
            (other, lambda g: np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim - 1))))),
        ])

    def __getitem__(self, index):
        shape = self.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return out

        return self._make(self.value[index], [(self, back)])

    @property
    def T(self):
        return self._make(self.value.T, [(self, lambda g: g.T)])

    def reshape(self, *shape):
        old = self.shape
        return self._make(self.value.reshape(*shape), [(self, lambda g: g.reshape(old))])

    # reductions and elementwise functions
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._make(self.value.sum(axis=axis, keepdims=keepdims), [(self, back)])

    def exp(self):
        out = np.exp(self.value)
        return self._make(out, [(self, lambda g: g * out)])

    def log(self):
        x = self.value
        return self._make(np.log(x), [(self, lambda g: g / x)])

    def logistic(self):
        out = expit(self.value)
        return self._make(out, [(self, lambda g: g * out * (1 - out))])

    def log_logistic(self):
        x = self.value
        return self._make(log_expit(x), [(self, lambda g: g * expit(-x))])

    def logsumexp(self, axis=-1, keepdims: bool = False):
        x = self.value
        out = logsumexp(x, axis=axis, keepdims=True)
        soft = np.exp(x - out)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return g * soft

        return self._make(out if keepdims else np.squeeze(out, axis=axis), [(self, back)])

    def max(self, axis=-1, keepdims: bool = False):
        x = self.value
        out = x.max(axis=axis, keepdims=True)
        hit = (x == out).astype(np.float64)
        hit /= hit.sum(axis=axis, keepdims=True)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return g * hit

        return self._make(out if keepdims else np.squeeze(out, axis=axis), [(self, back)])

    # driver
    def backward(self, seed=None):
        order, seen = [], set()

        def visit(t):
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for parent, _ in node.parents:
                    if id(parent) not in seen:
                        stack.append((parent, False))

        visit(self)
        grads = {id(self): np.ones(self.shape) if seed is None else np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node.parents:
                contrib = fn(g)
                key = id(parent)
                grads[key] = contrib if key not in grads else grads[key] + contrib


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def piece(k):
        return lambda g: np.take(g, k, axis=axis)

    parents = tuple((t, piece(k)) for k, t in enumerate(tensors) if t.requires_grad)
    return Tensor(value, parents)

