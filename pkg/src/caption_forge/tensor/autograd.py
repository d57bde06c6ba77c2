"""Reverse-mode differentiation over a recorded graph of known ops."""

import numpy as np

from .ops import OPS


class UnsupportedOperationError(RuntimeError):
    """Raised when a gradient is requested through an op with no backward rule."""


class Node:
    __slots__ = ("value", "op", "parents", "cache", "name")

    def __init__(self, value, op=None, parents=(), cache=None, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.cache = cache
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, name={self.name!r}, shape={self.shape})"


class Tape:
    """Records a forward pass so that :meth:`backward` can replay it in reverse.

    Example::

        tape = Tape()
        x = tape.leaf(np.array([-1.0, 2.0]), name="x")
        y = tape.apply("relu", x)
        grads = tape.backward(y, np.ones(2))   # {"x": array([0., 1.])}
    """

    def __init__(self):
        self.nodes = []

    def leaf(self, value, name=None):
        node = Node(np.asarray(value, dtype=np.float64), name=name)
        self.nodes.append(node)
        return node

    def apply(self, op, *inputs, **attrs):
        spec = OPS.get(op)
        if spec is None:
            raise UnsupportedOperationError(f"unknown op {op!r}")
        if len(inputs) != spec.n_inputs:
            raise TypeError(f"{op} takes {spec.n_inputs} tensor inputs, got {len(inputs)}")
        value, cache = spec.forward(*(n.value for n in inputs), **attrs)
        node = Node(value, op, tuple(inputs), cache)
        self.nodes.append(node)
        return node

    def record(self, op, value, *inputs):
        """Append a node computed outside the op table; it has no backward rule."""
        node = Node(np.asarray(value, dtype=np.float64), op, tuple(inputs))
        self.nodes.append(node)
        return node

    def backward(self, output, upstream=None):
        """Return ``{node_name: gradient}`` for every named node ``output`` depends on.

        ``upstream`` defaults to 1 for scalar outputs.
        """
        if upstream is None:
            if np.ndim(output.value) != 0:
                raise ValueError("upstream gradient required for non-scalar output")
            upstream = 1.0
        grads = {id(output): np.asarray(upstream, dtype=np.float64)}
        index = {id(n): i for i, n in enumerate(self.nodes)}
        if id(output) not in index:
            raise ValueError("output node was not recorded on this tape")
        for node in reversed(self.nodes[: index[id(output)] + 1]):
            g = grads.pop(id(node), None)
            if g is None or node.op is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            spec = OPS.get(node.op)
            if spec is None:
                raise UnsupportedOperationError(f"no backward rule for op {node.op!r}")
            for parent, pg in zip(node.parents, spec.backward(g, node.cache)):
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return {n.name: grads[id(n)] for n in self.nodes if n.name is not None and id(n) in grads}
