"""Graph nodes and the forward/backward drivers.

A graph is built eagerly: every primitive call evaluates its value at
construction and records its parents. :func:`forward` re-evaluates a graph
from its leaves (useful after a leaf's value has been replaced) and
:func:`backward` accumulates reverse-mode gradients into the leaves.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import BackwardError, NumericalError, ShapeError

MAX_RANK = 5


def as_array(data) -> np.ndarray:
    """Coerce ``data`` to a float64 ndarray of rank <= 5."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"tensors have at most {MAX_RANK} axes, got shape {arr.shape}")
    return arr


class Primitive:
    """A differentiable operation.

    Subclasses implement ``forward(values, attrs) -> (value, ctx)`` and
    ``backward(grad, values, value, ctx, attrs, needs) -> tuple`` where
    ``needs[i]`` says whether parent ``i`` wants a gradient; entries for
    parents that do not may be ``None``.
    """

    name = "primitive"
    check_finite = False

    def forward(self, values, attrs):
        raise NotImplementedError

    def backward(self, grad, values, value, ctx, attrs, needs):
        raise NotImplementedError


class Node:
    """A value in a differentiation graph.

    Leaves are created with :func:`leaf` / :func:`const`; interior nodes are
    produced by primitives in :mod:`voxbayes.autodiff.ops`.
    """

    __slots__ = ("value", "_grad", "op", "parents", "attrs", "ctx",
                 "requires_grad", "name", "_consumed", "__weakref__")

    def __init__(self, value, op=None, parents=(), attrs=None, ctx=None,
                 requires_grad=False, name=None):
        self.value = value
        self._grad = None
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op is None

    def __repr__(self):
        kind = self.op.name if self.op else ("param" if self.requires_grad else "const")
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} {kind} shape={self.value.shape}>"

    # make ndarray <op> Node dispatch to the reflected Node operator
    __array_ufunc__ = None

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def leaf(data, name=None) -> Node:
    """A trainable leaf; gradients are accumulated into it."""
    return Node(as_array(data).copy(), requires_grad=True, name=name)


def const(data, name=None) -> Node:
    """A leaf that never receives a gradient."""
    return Node(as_array(data), requires_grad=False, name=name)


def lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def apply(op: Primitive, *inputs, **attrs) -> Node:
    parents = tuple(lift(x) for x in inputs)
    value, ctx = op.forward([p.value for p in parents], attrs)
    if op.check_finite and not np.all(np.isfinite(value)):
        raise NumericalError(f"{op.name}: produced non-finite values")
    return Node(value, op, parents, attrs, ctx,
                requires_grad=any(p.requires_grad for p in parents))


def topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def forward(root: Node) -> np.ndarray:
    """Re-evaluate every interior node from the current leaf values."""
    for node in topo_order(root):
        if node.op is None:
            continue
        value, ctx = node.op.forward([p.value for p in node.parents], node.attrs)
        if node.op.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"{node.op.name}: produced non-finite values")
        node.value, node.ctx = value, ctx
    return root.value


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from each trainable leaf to its gradient. The graph must
    be :func:`reset` before a second sweep.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.value.shape}")
    if root._consumed:
        raise BackwardError("backward already ran on this graph; call reset() first")
    order = topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.op is not None else grads.get(id(node))
        if g is None or not node.requires_grad:
            continue
        if node.op is None:
            continue
        needs = [p.requires_grad for p in node.parents]
        parent_grads = node.op.backward(g, [p.value for p in node.parents], node.value,
                                        node.ctx, node.attrs, needs)
        for p, pg, need in zip(node.parents, parent_grads, needs):
            if not need or pg is None:
                continue
            if pg.shape != p.value.shape:
                raise ShapeError(f"{node.op.name}: gradient shape {pg.shape} "
                                 f"does not match input shape {p.value.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for node in order:
        node._consumed = True
        if node.op is None and node.requires_grad:
            g = grads.get(id(node))
            node._grad = np.zeros_like(node.value) if g is None else g
            out[node] = node._grad
    return out


def reset(root: Node) -> None:
    """Clear accumulated gradients so :func:`backward` may run again."""
    for node in topo_order(root):
        node._grad = None
        node._consumed = False


def value_and_grad(fn: Callable[..., Node], *arrays):
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return (value, grads)."""
    leaves = [leaf(a) for a in arrays]
    root = fn(*leaves)
    grads = backward(root)
    return float(root.value.reshape(())), [grads[lf] for lf in leaves]
