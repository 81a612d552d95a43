"""Minimal reverse-mode tape over float64 numpy arrays.

Covers exactly the operation set the operator models need: elementwise
arithmetic with broadcasting, matmul, reductions, GELU, and custom linear
ops (registered with their analytic adjoints).  Gradients of any scalar
composition match central finite differences; that check is the contract
and lives in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf


class Tensor:
    """Array value plus tape bookkeeping.

    ``requires_grad`` marks trainable leaves; interior nodes carry the
    parent links and a vjp closure filled in by the op that produced them.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = "param" if self.requires_grad and not self._parents else "node"
        return f"<Tensor {tag} shape={self.shape}>"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not on the tape; divide by scalars")

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Tape node from an op result; ``vjp(g)`` yields one grad per parent."""
    out = Tensor(value, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return make_node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return make_node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return make_node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n); the left operand may carry batch axes."""
    if b.value.ndim != 2:
        raise ValueError("matmul right operand must be a plain matrix")
    return make_node(
        a.value @ b.value,
        (a, b),
        lambda g: (
            g @ b.value.T,
            np.einsum("...mi,...mj->ij", a.value, g),
        ),
    )


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(a.value.sum(axis=axis), (a,), vjp)


def tensor_mean(a: Tensor, axis=None) -> Tensor:
    count = a.value.size if axis is None else a.value.shape[axis]
    return scale(tensor_sum(a, axis=axis), 1.0 / count)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    phi_cdf = 0.5 * (1.0 + erf(a.value / _SQRT2))

    def vjp(g):
        density = _INV_SQRT_2PI * np.exp(-0.5 * a.value * a.value)
        return (g * (phi_cdf + a.value * density),)

    return make_node(a.value * phi_cdf, (a,), vjp)


def square(a: Tensor) -> Tensor:
    return make_node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def backward(loss: Tensor) -> None:
    """Reverse-mode gradients of a scalar loss into ``.grad`` slots."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError(
            "loss is detached from every trainable tensor; nothing to differentiate"
        )
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            if g is not None and node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
