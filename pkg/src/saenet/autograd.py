"""Reverse-mode automatic differentiation over the kernels in :mod:`saenet.tensor`.

Each differentiable op evaluates eagerly and returns a :class:`Node` that
remembers its parents and a closure mapping the upstream gradient to one
gradient per parent.  :func:`backward` walks the graph reachable from a
scalar loss in reverse topological order, accumulating gradients by
addition so fan-out (a residual skip, ``x + x``) is handled naturally, and
deposits leaf gradients into their :class:`Parameter` objects.

A graph can be walked once.  Saved forward values are released after the
walk and a second :func:`backward` on the same loss raises ContractError;
re-run the forward pass instead.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DataFormatError, DimensionError

_grad_enabled = True
_relu_margins: Optional[list] = None


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents or backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_relu_margins():
    """Collect ``min |input|`` of every relu evaluated inside the block."""
    global _relu_margins
    prev, _relu_margins = _relu_margins, []
    try:
        yield _relu_margins
    finally:
        _relu_margins = prev


class Parameter:
    """A named trainable array with its gradient accumulator and momentum slot."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.velocity = self.velocity.astype(dtype)

    def node(self) -> "Node":
        return Node(self.value, param=self, requires_grad=True, op="param")

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Node:
    """One recorded value on the tape."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "param", "op", "grad", "_consumed")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad=False, param: Optional[Parameter] = None, op: str = "const"):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.param = param
        self.op = op
        self.grad = None
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(np.asarray(value))


def variable(value) -> Node:
    """A leaf that receives a gradient without belonging to a Parameter."""
    return Node(np.asarray(value), requires_grad=True, op="input")


def make_node(value, parents: Sequence[Node], backward_fn: Callable, op: str) -> Node:
    """Record an op result.  ``backward_fn(grad)`` returns one gradient (or None) per parent."""
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, parents, backward_fn, requires_grad=True, op=op)


def backward(loss: Node) -> None:
    """Propagate d(loss)/d(.) to every reachable Parameter and variable leaf."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if loss._consumed:
        raise ContractError("this graph was already walked by backward(); run the forward pass again")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any parameter or variable")

    order: list[Node] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        node._consumed = True
        if g is None:
            continue
        if node.param is not None:
            node.param.grad += g
        if node.op == "input":
            node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node.backward_fn = None
        node.parents = ()


# --------------------------------------------------------------------------
# differentiable ops
# --------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    out = T.add(a.value, b.value)
    return make_node(out, (a, b), lambda g: (g, g), "add")


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of equal-shaped operands."""
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul: shapes differ {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return make_node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Node, factor: float) -> Node:
    return make_node(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return make_node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(a: Node) -> Node:
    x = a.value
    if _relu_margins is not None and x.size:
        _relu_margins.append(float(np.abs(x).min()))
    mask = x > 0
    return make_node(np.where(mask, x, 0).astype(x.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Node) -> Node:
    y = T.sigmoid(a.value)
    return make_node(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    out = T.matmul(av, bv)
    return make_node(out, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def linear(x: Node, weight: Node, bias: Optional[Node] = None) -> Node:
    """``x @ weight + bias`` with weight laid out (in_features, out_features)."""
    xv, wv = x.value, weight.value
    out = T.matmul(xv, wv)
    if bias is None:
        return make_node(out, (x, weight), lambda g: (g @ wv.T, xv.T @ g), "linear")
    if bias.value.shape != (wv.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.value.shape}, expected ({wv.shape[1]},)")
    out = out + bias.value
    return make_node(out, (x, weight, bias), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)), "linear")


def conv2d(x: Node, weight: Node, bias: Optional[Node], spec: T.ConvSpec) -> Node:
    out, cols = T.conv2d_forward(x.value, weight.value, None if bias is None else bias.value, spec)
    x_shape, wv = x.value.shape, weight.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx, gw, gb = T.conv2d_backward(g, x_shape, wv, cols, spec,
                                       need_input=x.requires_grad, need_weight=weight.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_node(out, parents, bw, "conv2d")


def batchnorm2d(x: Node, gamma: Node, beta: Node, running_mean, running_var, training: bool,
                eps: float = T.BN_EPS, momentum: float = T.BN_MOMENTUM) -> Node:
    out, cache = T.batchnorm2d_forward(x.value, gamma.value, beta.value, running_mean, running_var,
                                       training, eps, momentum)
    gv = gamma.value
    return make_node(out, (x, gamma, beta), lambda g: T.batchnorm2d_backward(g, gv, cache), "batchnorm2d")


def max_pool2d(x: Node, kernel: int = 3, stride: int = 2, padding: int = 1) -> Node:
    out, flat = T.max_pool2d_forward(x.value, kernel, stride, padding)
    shape = x.value.shape
    return make_node(out, (x,), lambda g: (T.max_pool2d_backward(g, flat, shape, padding),), "max_pool2d")


def global_avg_pool(x: Node) -> Node:
    out = T.global_avg_pool(x.value)
    shape = x.value.shape
    return make_node(out, (x,), lambda g: (T.global_avg_pool_backward(g, shape),), "global_avg_pool")


def channel_scale(x: Node, gates: Node) -> Node:
    xv, gv = x.value, gates.value
    out = T.channel_scale(xv, gv)

    def bw(g):
        return g * gv[:, :, None, None], (g * xv).sum(axis=(2, 3))

    return make_node(out, (x, gates), bw, "channel_scale")


def concat_channels(parts: Sequence[Node]) -> Node:
    if len(parts) == 1:
        return parts[0]
    out = T.concat_channels([p.value for p in parts])
    bounds = np.cumsum([p.value.shape[1] for p in parts])[:-1]
    return make_node(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=1)), "concat")


def cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.value
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    k = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k or not np.issubdtype(labels.dtype, np.integer)):
        raise DataFormatError(f"cross_entropy: labels must be integers in [0, {k})")
    logp = T.log_softmax_rows(z)
    n = z.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")
