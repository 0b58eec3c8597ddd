"""Minimal reverse-mode differentiation over numpy arrays.

Gradients flow only to explicit ``Var`` leaves (e.g. an attack input);
network weights enter the graph as plain arrays and are treated as
constants. All values are 2-D ``(batch, features)`` float arrays except
the final scalar produced by :func:`total_sum`. Per-row computations are
independent, so one backward pass yields the input gradient of every
example in a batch at once.
"""
from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


class Var:
    """A node in the differentiation tape."""

    __slots__ = ("value", "grad", "_parents", "_backprop")

    def __init__(self, value, _parents=(), _backprop=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = _parents
        self._backprop = _backprop

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable node; self must be scalar."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar root")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
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
                stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # -- elementwise arithmetic (Var-Var operands must share a shape; a
    #    plain scalar or same-shape array is treated as a constant) --

    def __add__(self, other):
        if isinstance(other, Var):
            out = Var(self.value + other.value, (self, other))

            def backprop(g):
                self._accumulate(g)
                other._accumulate(g)
        else:
            out = Var(self.value + other, (self,))

            def backprop(g):
                self._accumulate(g)
        out._backprop = backprop
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.value, (self,))

        def backprop(g):
            self._accumulate(-g)

        out._backprop = backprop
        return out

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Var):
            out = Var(self.value * other.value, (self, other))

            def backprop(g):
                self._accumulate(g * other.value)
                other._accumulate(g * self.value)
        else:
            other = np.asarray(other, dtype=float)
            out = Var(self.value * other, (self,))

            def backprop(g):
                self._accumulate(g * other)
        out._backprop = backprop
        return out

    __rmul__ = __mul__


def constant(value) -> Var:
    """Wrap an array as a leaf that collects no gradient."""
    return Var(value)


def affine(x: Var, weight: np.ndarray, bias: np.ndarray) -> Var:
    """x @ weight.T + bias with weight/bias held constant."""
    out = Var(x.value @ weight.T + bias, (x,))

    def backprop(g):
        x._accumulate(g @ weight)

    out._backprop = backprop
    return out


def relu(x: Var) -> Var:
    mask = x.value > 0
    out = Var(x.value * mask, (x,))

    def backprop(g):
        x._accumulate(g * mask)

    out._backprop = backprop
    return out


def softmax_rows(x: Var) -> Var:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Var(p, (x,))

    def backprop(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    out._backprop = backprop
    return out


def log_floored(x: Var, floor: float = LOG_FLOOR) -> Var:
    """log(max(x, floor)); the gradient is zero at or below the floor."""
    clipped = np.maximum(x.value, floor)
    out = Var(np.log(clipped), (x,))
    live = x.value > floor

    def backprop(g):
        x._accumulate(np.where(live, g / clipped, 0.0))

    out._backprop = backprop
    return out


def rowsum(x: Var) -> Var:
    """(B, C) -> (B, 1) sum along the last axis."""
    out = Var(x.value.sum(axis=-1, keepdims=True), (x,))

    def backprop(g):
        x._accumulate(np.broadcast_to(g, x.value.shape).copy())

    out._backprop = backprop
    return out


def rowmax(x: Var) -> Var:
    """(B, C) -> (B, 1) max along the last axis; ties route to the lowest index."""
    idx = x.value.argmax(axis=-1)
    rows = np.arange(x.value.shape[0])
    out = Var(x.value[rows, idx][:, None], (x,))

    def backprop(g):
        full = np.zeros_like(x.value)
        full[rows, idx] = g[:, 0]
        x._accumulate(full)

    out._backprop = backprop
    return out


def take_col(x: Var, indices: np.ndarray) -> Var:
    """(B, C) -> (B, 1) selecting column indices[b] in row b."""
    indices = np.asarray(indices, dtype=int)
    rows = np.arange(x.value.shape[0])
    out = Var(x.value[rows, indices][:, None], (x,))

    def backprop(g):
        full = np.zeros_like(x.value)
        full[rows, indices] = g[:, 0]
        x._accumulate(full)

    out._backprop = backprop
    return out


def total_sum(x: Var) -> Var:
    """Reduce to the scalar used as a backward() root."""
    out = Var(x.value.sum(), (x,))

    def backprop(g):
        x._accumulate(np.full_like(x.value, float(g)))

    out._backprop = backprop
    return out


def mean_vars(items: list[Var]) -> Var:
    """Elementwise mean of same-shaped Vars."""
    if not items:
        raise ValueError("mean_vars of an empty list")
    acc = items[0]
    for v in items[1:]:
        acc = acc + v
    return acc * (1.0 / len(items))
