"""Reverse-mode differentiation over numpy values.

The unrolled trainer records its forward pass as a graph of Node objects,
each holding a value and a hand-written vector-Jacobian product against its
parents. backward() walks the graph once in reverse topological order and
accumulates gradients into the leaves. Only the primitives the solvers need
are provided; the special-function adjoints reuse the kernels module.
"""

import numpy as np

from . import kernels


class Node:
    """One recorded value. Leaves have no parents and collect .grad."""

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def neg(a) -> Node:
    a = wrap(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    return Node(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a) -> Node:
    a = wrap(a)
    return Node(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = wrap(a)
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def nsum(a, axis=None, keepdims: bool = False) -> Node:
    a = wrap(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Node(value, (a,), vjp)


def log(a) -> Node:
    a = wrap(a)
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def exp(a) -> Node:
    a = wrap(a)
    value = np.exp(a.value)
    return Node(value, (a,), lambda g: (g * value,))


def square(a) -> Node:
    a = wrap(a)
    return Node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def maximum(a, floor: float) -> Node:
    """Elementwise max against a constant; gradient is cut where clamped."""
    a = wrap(a)
    return Node(
        np.maximum(a.value, floor),
        (a,),
        lambda g: (g * (a.value > floor),),
    )


def softmax_rows(a) -> Node:
    a = wrap(a)
    u = kernels.softmax(a.value, axis=-1)

    def vjp(g):
        inner = np.sum(g * u, axis=-1, keepdims=True)
        return (u * (g - inner),)

    return Node(u, (a,), vjp)


def softplus(a) -> Node:
    a = wrap(a)
    return Node(
        kernels.softplus(a.value),
        (a,),
        lambda g: (g * kernels.sigmoid(a.value),),
    )


def lgamma(a) -> Node:
    a = wrap(a)
    return Node(
        kernels.log_gamma(a.value),
        (a,),
        lambda g: (g * kernels.digamma(a.value),),
    )


def digamma(a) -> Node:
    a = wrap(a)
    return Node(
        kernels.digamma(a.value),
        (a,),
        lambda g: (g * kernels.trigamma(a.value),),
    )


def inv_digamma(a) -> Node:
    # The forward value solves digamma(x) = a; by the inverse function rule
    # its derivative is 1 / trigamma(x) at the converged point.
    a = wrap(a)
    x = np.asarray(kernels.inv_digamma(a.value))
    return Node(x, (a,), lambda g: (g / kernels.trigamma(x),))


def concat_rows(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    split = a.value.shape[0]
    return Node(
        np.concatenate([a.value, b.value], axis=0),
        (a, b),
        lambda g: (g[:split], g[split:]),
    )


def _toposort(root: Node):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into .grad of every reachable node."""
    if np.size(root.value) != 1:
        raise ValueError("backward: root must be scalar")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
