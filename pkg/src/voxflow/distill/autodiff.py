"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a float64 ndarray and records the operations that produced
it; ``backward()`` walks the tape in reverse topological order.  Only the
handful of ops the distillation losses need are implemented.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node on the differentiation tape."""

    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- tape -------------------------------------------------------------

    def _node(self, data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad or p._parents for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
            out.requires_grad = True
        return out

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not np.isfinite(self.data):
            raise FloatingPointError("non-finite loss")
        topo: list[Tensor] = []
        seen = set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                cur, done = stack.pop()
                if done:
                    topo.append(cur)
                    continue
                if id(cur) in seen:
                    continue
                seen.add(id(cur))
                stack.append((cur, True))
                for p in cur._parents:
                    stack.append((p, False))

        visit(self)
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- ops --------------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def back(g):
            self._accum(g)
            other._accum(g)
        return self._node(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def back(g):
            self._accum(g)
            other._accum(-g)
        return self._node(self.data - other.data, (self, other), back)

    def __rsub__(self, other):
        return Tensor(other).__sub__(self)

    def __neg__(self):
        def back(g):
            self._accum(-g)
        return self._node(-self.data, (self,), back)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def back(g):
            self._accum(g * other.data)
            other._accum(g * self.data)
        return self._node(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a Tensor is not supported; use mul of a reciprocal")
        return self * (1.0 / other)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def back(g):
            self._accum(g @ other.data.T)
            other._accum(self.data.T @ g)
        return self._node(self.data @ other.data, (self, other), back)

    def tanh(self):
        y = np.tanh(self.data)

        def back(g):
            self._accum(g * (1.0 - y * y))
        return self._node(y, (self,), back)

    def relu(self):
        mask = self.data > 0.0

        def back(g):
            self._accum(g * mask)
        return self._node(self.data * mask, (self,), back)

    def sqrt(self):
        y = np.sqrt(self.data)

        def back(g):
            self._accum(g * (0.5 / y))
        return self._node(y, (self,), back)

    def square(self):
        def back(g):
            self._accum(g * (2.0 * self.data))
        return self._node(self.data * self.data, (self,), back)

    def sum(self, axis=None, keepdims=False):
        def back(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                self._accum(np.broadcast_to(
                    g if keepdims else np.expand_dims(g, axis), self.data.shape).copy())
        return self._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup with scatter-add backward."""
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accum(gt)
    return table._node(table.data[idx], (table,), back)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    parts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accum(piece)
    return parts[0]._node(np.concatenate([p.data for p in parts], axis=axis),
                          tuple(parts), back)
