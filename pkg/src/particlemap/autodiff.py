"""Minimal reverse-mode automatic differentiation over dense real tensors.

The op set is deliberately small: affine maps, element-wise sigmoid,
addition, batched last-two-axes contraction, and a weighted squared-distance
reduction. That is everything the sampling network needs, and nothing else.

Tensors are plain float64 ``numpy.ndarray`` objects. A :class:`Graph` is a
list of :class:`Node` objects in construction order, which is automatically
a topological order because an op can only reference nodes that already
exist. Adjoints are zeroed at the start of every backward pass and
accumulate additively across fan-out.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

KINDS = (
    "input",
    "parameter",
    "affine",
    "sigmoid",
    "add",
    "batched-contract",
    "weighted-sqdist",
)


class GraphError(ValueError):
    """Raised for malformed graphs, bad shapes, or misuse of the API."""


def as_tensor(values, shape=None):
    """Coerce to a float64 array, optionally reshaping flat row-major data."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


class Node:
    """One vertex of the computation DAG.

    ``value`` is populated by the forward pass, ``adjoint`` by the backward
    pass (same shape as ``value``).
    """

    __slots__ = ("kind", "name", "parents", "value", "adjoint", "uid")

    def __init__(self, kind, name, parents, uid):
        self.kind = kind
        self.name = name
        self.parents = parents
        self.value = None
        self.adjoint = None
        self.uid = uid

    def __repr__(self):
        return f"Node({self.kind}:{self.name})"


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _squeeze_weight(w, node):
    # layer generators emit (m, n, 1); plain parameters are (m, n)
    if w.ndim == 2:
        return w
    if w.ndim > 2 and all(s == 1 for s in w.shape[2:]):
        return w.reshape(w.shape[0], w.shape[1])
    raise GraphError(
        f"{node}: affine weight must be 2-D (or 2-D with trailing singleton "
        f"axes), got shape {w.shape}"
    )


def _squeeze_bias(b, m, node):
    flat = b.reshape(-1)
    if flat.shape[0] != m:
        raise GraphError(
            f"{node}: affine bias has {flat.shape[0]} entries, expected {m}"
        )
    return flat


class Graph:
    """A DAG of tensor ops supporting one forward and one backward pass.

    Nodes are created through the builder methods (:meth:`input`,
    :meth:`parameter`, :meth:`affine`, ...). The output defaults to the node
    created last. With ``checked=True`` every intermediate is asserted
    finite, which is useful in tests but costs time in training loops.
    """

    def __init__(self, checked=False):
        self.checked = checked
        self.nodes = []
        self.inputs = {}
        self.params = {}
        self.output = None
        self._forward_done = False

    # -- construction -----------------------------------------------------

    def _register(self, node):
        self.nodes.append(node)
        self.output = node
        return node

    def input(self, name):
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        node = Node("input", name, (), len(self.nodes))
        self.inputs[name] = node
        return self._register(node)

    def parameter(self, name, value):
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        node = Node("parameter", name, (), len(self.nodes))
        node.value = np.ascontiguousarray(as_tensor(value))
        if self.checked and not np.all(np.isfinite(node.value)):
            raise GraphError(f"{node}: non-finite parameter value")
        self.params[name] = node
        return self._register(node)

    def _op(self, kind, parents):
        node = Node(kind, f"{kind}#{len(self.nodes)}", tuple(parents), len(self.nodes))
        return self._register(node)

    def affine(self, weight, x, bias):
        return self._op("affine", (weight, x, bias))

    def sigmoid(self, x):
        return self._op("sigmoid", (x,))

    def add(self, a, b):
        return self._op("add", (a, b))

    def batched_contract(self, a, b):
        return self._op("batched-contract", (a, b))

    def weighted_sqdist(self, x, y, w):
        return self._op("weighted-sqdist", (x, y, w))

    # -- evaluation --------------------------------------------------------

    def set_param(self, name, value):
        self.params[name].value = np.ascontiguousarray(as_tensor(value))

    def forward_eval(self, bindings):
        """Evaluate every node given ``bindings`` (input name -> tensor).

        Returns the output node's value. All inputs must be bound; shapes
        must be compatible per node kind.
        """
        for name, node in self.inputs.items():
            if name not in bindings:
                raise GraphError(f"input {name!r} not bound")
            node.value = as_tensor(bindings[name])
        for node in self.nodes:
            if node.kind not in ("input", "parameter"):
                node.value = self._eval(node)
            if self.checked and not np.all(np.isfinite(node.value)):
                raise GraphError(f"{node}: non-finite value in checked mode")
        self._forward_done = True
        return self.output.value

    def _eval(self, node):
        kind = node.kind
        if kind == "affine":
            wn, xn, bn = node.parents
            w = _squeeze_weight(wn.value, node)
            b = _squeeze_bias(bn.value, w.shape[0], node)
            x = xn.value
            if x.shape[-1] != w.shape[1]:
                raise GraphError(
                    f"{node}: input last axis {x.shape[-1]} does not match "
                    f"weight columns {w.shape[1]}"
                )
            return x @ w.T + b
        if kind == "sigmoid":
            return expit(node.parents[0].value)
        if kind == "add":
            a, b = node.parents
            try:
                return a.value + b.value
            except ValueError as exc:
                raise GraphError(f"{node}: {exc}") from None
        if kind == "batched-contract":
            a, b = node.parents
            try:
                return np.matmul(a.value, b.value)
            except ValueError as exc:
                raise GraphError(f"{node}: {exc}") from None
        if kind == "weighted-sqdist":
            xn, yn, wn = node.parents
            if xn.value.shape != yn.value.shape:
                raise GraphError(
                    f"{node}: operand shapes differ "
                    f"{xn.value.shape} vs {yn.value.shape}"
                )
            diff = xn.value - yn.value
            return np.asarray(np.sum(wn.value * np.sum(diff * diff, axis=-1)))
        raise GraphError(f"{node}: unknown kind")

    def backward(self, output_adjoint):
        """Reverse pass; returns parameter name -> gradient.

        Gradients are the derivatives of ``sum(output_adjoint * output)``
        with respect to each parameter. Requires a preceding
        :meth:`forward_eval` on this graph.
        """
        if not self._forward_done:
            raise GraphError("backward called before forward_eval")
        for node in self.nodes:
            node.adjoint = np.zeros_like(node.value)
        seed = as_tensor(output_adjoint)
        if seed.shape != self.output.value.shape:
            seed = np.broadcast_to(seed, self.output.value.shape).copy()
        self.output.adjoint = seed
        for node in reversed(self.nodes):
            if node.kind not in ("input", "parameter"):
                self._propagate(node)
        return {name: node.adjoint for name, node in self.params.items()}

    def _propagate(self, node):
        g = node.adjoint
        kind = node.kind
        if kind == "affine":
            wn, xn, bn = node.parents
            w = _squeeze_weight(wn.value, node)
            x = xn.value
            m, n = w.shape
            g2 = g.reshape(-1, m)
            x2 = xn.value.reshape(-1, n)
            wn.adjoint += (g2.T @ x2).reshape(wn.value.shape)
            xn.adjoint += (g @ w).reshape(x.shape)
            bn.adjoint += g2.sum(axis=0).reshape(bn.value.shape)
        elif kind == "sigmoid":
            (xn,) = node.parents
            y = node.value
            xn.adjoint += g * y * (1.0 - y)
        elif kind == "add":
            a, b = node.parents
            a.adjoint += _unbroadcast(g, a.value.shape)
            b.adjoint += _unbroadcast(g, b.value.shape)
        elif kind == "batched-contract":
            a, b = node.parents
            ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
            gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
            a.adjoint += _unbroadcast(ga, a.value.shape)
            b.adjoint += _unbroadcast(gb, b.value.shape)
        elif kind == "weighted-sqdist":
            xn, yn, wn = node.parents
            diff = xn.value - yn.value
            scaled = 2.0 * g * np.expand_dims(wn.value, -1) * diff
            xn.adjoint += scaled
            yn.adjoint -= scaled
            wn.adjoint += g * np.sum(diff * diff, axis=-1)


def forward_eval(graph, bindings):
    """Module-level alias for :meth:`Graph.forward_eval`."""
    return graph.forward_eval(bindings)


def backward(graph, output_adjoint):
    """Module-level alias for :meth:`Graph.backward`."""
    return graph.backward(output_adjoint)


def finite_diff_check(graph, bindings, step, output_adjoint=None):
    """Max relative error between analytic and central-difference gradients.

    The scalar being differentiated is ``sum(output_adjoint * output)``
    (adjoint of ones by default). The error for one parameter entry is
    ``|analytic - numeric| / (|analytic| + step)``; the max over all entries
    of all parameters is returned, 0.0 for a parameter-free graph.
    """
    if step <= 0:
        raise GraphError("finite_diff_check requires step > 0")
    if not graph.params:
        return 0.0
    out = graph.forward_eval(bindings)
    if output_adjoint is None:
        output_adjoint = np.ones_like(out)
    grads = graph.backward(output_adjoint)

    def objective():
        return float(np.sum(output_adjoint * graph.forward_eval(bindings)))

    worst = 0.0
    for name, node in graph.params.items():
        analytic = grads[name].ravel()
        flat = node.value.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = objective()
            flat[i] = saved - step
            lo = objective()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(analytic[i] - numeric) / (abs(analytic[i]) + step)
            worst = max(worst, rel)
    # restore values for subsequent use of the graph
    graph.forward_eval(bindings)
    return worst
