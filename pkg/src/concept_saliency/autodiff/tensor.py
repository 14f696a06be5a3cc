"""Lazy computation graph with reverse-mode differentiation.

Building expressions with the functions in :mod:`.ops` only records nodes.
:func:`forward` evaluates a graph, :func:`backward` walks it in reverse
topological order. The ReLU rule is chosen per backward call, so the same
forward pass can be differentiated as vanilla, guided or rectified.

A graph is single-writer. Leaf tensors with ``requires_grad=False`` are never
written during backward and can be shared by graphs running concurrently.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import GraphError, ShapeError
from .rules import VANILLA, BackpropRule

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class Tensor:
    """A node of the graph.

    Leaves carry ``values`` from construction; interior nodes get them from
    :func:`forward`. ``grad`` is allocated by :func:`backward` on leaves that
    require it.
    """

    __slots__ = ("id", "op", "parents", "values", "grad", "requires_grad", "name", "_shape")

    def __init__(self, values=None, *, requires_grad=False, dtype=None, name=None,
                 op=None, parents=(), shape=None):
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.grad = None
        if values is not None:
            arr = np.asarray(values)
            if dtype is not None:
                arr = arr.astype(dtype, copy=False)
            elif arr.dtype.kind != "f":
                arr = arr.astype(DEFAULT_DTYPE)
            self.values = arr
            self._shape = arr.shape
        else:
            self.values = None
            self._shape = tuple(shape) if shape is not None else None

    @property
    def shape(self):
        return self._shape

    @property
    def is_leaf(self):
        return self.op is None

    @property
    def op_record(self):
        if self.op is None:
            return None
        return {"kind": self.op.kind, "parents": [p.id for p in self.parents]}

    def numpy(self):
        if self.values is None:
            raise GraphError(f"tensor {self.id} ({self.op.kind}) has not been evaluated; call forward()")
        return self.values

    def __repr__(self):
        kind = "leaf" if self.op is None else self.op.kind
        return f"Tensor(id={self.id}, kind={kind}, shape={self._shape})"

    # arithmetic sugar; the heavy ops live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def forward(root: Tensor) -> Tensor:
    """Evaluate every unevaluated node that ``root`` depends on."""
    for node in _topo_order(root):
        if node.values is not None:
            continue
        if node.op is None:
            raise GraphError(f"leaf tensor {node.id} has no values")
        node.values = node.op.forward(*(p.values for p in node.parents))
        if node.values.shape != node._shape:
            raise ShapeError(
                f"{node.op.kind}: produced shape {node.values.shape}, expected {node._shape}"
            )
    return root


def backward(output: Tensor, rule: BackpropRule = VANILLA, seed=None):
    """Propagate gradients from ``output`` to every leaf that requires them.

    Each participating leaf gets a fresh ``grad`` (overwritten, not
    accumulated). A non-scalar output needs an explicit ``seed`` of the same
    shape. Returns ``output`` for chaining.
    """
    if output.values is None:
        raise GraphError("backward called before forward: output has not been evaluated")
    if seed is None:
        if output.values.size != 1:
            raise GraphError(
                f"backward on non-scalar output of shape {output.shape} needs a seed gradient"
            )
        seed = np.ones_like(output.values)
    else:
        seed = np.asarray(seed, dtype=output.values.dtype)
        if seed.shape != output.values.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.values.shape}")
    order = _topo_order(output)
    leaves = [n for n in order if n.op is None and n.requires_grad]
    for leaf in leaves:
        leaf.grad = None
    grads = {output.id: seed}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.op is None:
            node.grad = g
            continue
        if any(p.values is None for p in node.parents):
            raise GraphError(f"{node.op.kind}: parent not evaluated")
        needs = [p.requires_grad for p in node.parents]
        pgrads = node.op.backward(g, rule, needs)
        for p, pg, need in zip(node.parents, pgrads, needs):
            if not need or pg is None:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.values)
    return output


def zero_grads(*tensors):
    for t in tensors:
        t.grad = None
