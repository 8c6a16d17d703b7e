"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward pass builds a fresh graph of :class:`Node` objects. Calling
:func:`backward` on a scalar root walks the graph once in reverse topological
order and stores a gradient on every reachable node. A graph may only be
differentiated once.

Broadcasting is limited to scalar-with-tensor; bias terms and row-wise
selections are expressed with matmuls against constant matrices instead.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class GraphError(RuntimeError):
    """Contract violation on the computation graph."""


def as_tensor(data) -> np.ndarray:
    """Validate external input as a finite, C-contiguous float64 array."""
    arr = np.array(data, dtype=np.float64, order="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite (got NaN or Inf)")
    return arr


class Node:
    __slots__ = ("value", "parents", "op", "_backward", "grad", "requires_grad", "_consumed")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        op: str = "leaf",
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = value
        self.parents = parents
        self.op = op
        self._backward = backward_fn
        self.grad: np.ndarray | None = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def variable(data) -> Node:
    """Leaf whose gradient is wanted."""
    return Node(as_tensor(data), requires_grad=True)


def constant(data) -> Node:
    """Leaf treated as fixed; its gradient is reported as zeros."""
    return Node(as_tensor(data), requires_grad=False)


def _elementwise_shapes(name: str, a: Node, b: Node) -> None:
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(grad: np.ndarray, node: Node) -> np.ndarray:
    if node.value.ndim == 0 and grad.ndim != 0:
        return np.asarray(grad.sum())
    return grad


def add(a: Node, b: Node) -> Node:
    _elementwise_shapes("add", a, b)

    def back(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return Node(a.value + b.value, (a, b), "add", back)


def sub(a: Node, b: Node) -> Node:
    _elementwise_shapes("sub", a, b)

    def back(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return Node(a.value - b.value, (a, b), "sub", back)


def mul(a: Node, b: Node) -> Node:
    _elementwise_shapes("mul", a, b)
    av, bv = a.value, b.value

    def back(g):
        ga = _unbroadcast(g * bv, a) if a.requires_grad else None
        gb = _unbroadcast(g * av, b) if b.requires_grad else None
        return ga, gb

    return Node(av * bv, (a, b), "mul", back)


def scale(a: Node, k: float) -> Node:
    k = float(k)

    def back(g):
        return (g * k,)

    return Node(a.value * k, (a,), "scale", back)


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return Node(av @ bv, (a, b), "matmul", back)


def sum(a: Node) -> Node:  # noqa: A001 - mirrors the op name
    shape = a.shape

    def back(g):
        return (np.full(shape, float(g)),)

    return Node(np.asarray(a.value.sum()), (a,), "sum", back)


def silu(a: Node) -> Node:
    """u * sigmoid(u), elementwise."""
    u = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * u))
    out = u * sig

    def back(g):
        return (g * (sig + u * sig * (1.0 - sig)),)

    return Node(out, (a,), "silu", back)


nonlinearity = silu


def cos(a: Node) -> Node:
    u = a.value

    def back(g):
        return (-g * np.sin(u),)

    return Node(np.cos(u), (a,), "cos", back)


def sin(a: Node) -> Node:
    u = a.value

    def back(g):
        return (g * np.cos(u),)

    return Node(np.sin(u), (a,), "sin", back)


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) for every node reachable from ``root``.

    Returns a map from node to gradient; the same arrays are also stored on
    ``node.grad``. Raises :class:`GraphError` for a non-scalar root or for a
    graph that has already been differentiated.
    """
    if root.value.size != 1:
        raise GraphError(f"backward() needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    if any(n._consumed for n in order):
        raise GraphError("graph already differentiated; rebuild it with a fresh forward pass")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        node._consumed = True
        g = grads.get(id(node))
        if g is None:
            g = np.zeros_like(node.value)
            grads[id(node)] = g
        node.grad = g
        if node._backward is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
        node._backward = None  # release closures
    return {n: n.grad for n in order}


def grad_of(fn: Callable[[Node], Node], x: np.ndarray) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` via a fresh graph."""
    leaf = variable(x)
    out = fn(leaf)
    backward(out)
    return leaf.grad


def tile_rows(row: np.ndarray, n: int) -> np.ndarray:
    return np.tile(np.asarray(row, dtype=np.float64), (n, 1))


def ones_column(n: int) -> Node:
    return constant(np.ones((n, 1)))


def add_bias(h: Node, bias: Node) -> Node:
    """h + bias broadcast over rows, expressed as ``ones @ bias``."""
    return h + matmul(ones_column(h.shape[0]), bias)


def total(nodes: Iterable[Node]) -> Node:
    it = iter(nodes)
    acc = next(it)
    for n in it:
        acc = acc + n
    return acc
