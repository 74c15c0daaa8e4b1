"""A static, re-executable op graph with reverse-mode gradients.

Graphs are built once (nodes reference earlier nodes by index, so they are
acyclic by construction), then executed any number of times with
:meth:`OpGraph.forward`. :func:`backward` walks the last execution in reverse
and returns one gradient per trainable parameter.

>>> g = OpGraph()
>>> w = g.parameter("w", [2.0])
>>> _ = g.sum(g.mul(w, w))
>>> float(g.forward())
4.0
>>> backward(g)["w"]
array([4.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import ops
from .errors import ContractError, ShapeError, StateError
from .tensor import DTYPE, as_tensor


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None


# Each entry: forward(inputs, attrs) -> (out, ctx); backward(g, inputs, out, ctx, attrs) -> grads
_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(name):
    def deco(cls):
        _OPS[name] = (cls.forward, cls.backward)
        return cls
    return deco


@_register("conv")
class _Conv:
    @staticmethod
    def forward(xs, a):
        out, cols = ops.conv_nd(xs[0], xs[1], a["stride"], a["padding"], return_cols=True)
        return out, cols

    @staticmethod
    def backward(g, xs, out, cols, a):
        gx, gk = ops.conv_nd_backward(g, xs[0].shape, xs[1], cols, a["stride"], a["padding"])
        return gx, gk


@_register("bias")
class _Bias:
    """Adds a per-channel bias to ``(..., C, *S)`` with ``ndim`` spatial axes."""

    @staticmethod
    def forward(xs, a):
        x, b = xs
        return x + b.reshape(b.shape + (1,) * a["ndim"]), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        d = a["ndim"]
        gb = g.sum(axis=tuple(range(g.ndim - d, g.ndim)))
        gb = gb.reshape(-1, gb.shape[-1]).sum(axis=0)
        return g, gb


@_register("relu")
class _Relu:
    @staticmethod
    def forward(xs, a):
        return ops.relu(xs[0]), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        return (g * (xs[0] > 0),)


@_register("max_pool")
class _MaxPool:
    @staticmethod
    def forward(xs, a):
        return ops.max_pool_nd(xs[0], a["window"], a["stride"], return_index=True)

    @staticmethod
    def backward(g, xs, out, idx, a):
        return (ops.max_pool_nd_backward(g, xs[0].shape, idx, a["window"], a["stride"]),)


@_register("global_avg_pool")
class _GAP:
    @staticmethod
    def forward(xs, a):
        return ops.global_avg_pool(xs[0], a["ndim"]), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        x = xs[0]
        d = a["ndim"]
        n = int(np.prod(x.shape[x.ndim - d:]))
        return (np.broadcast_to(g.reshape(g.shape + (1,) * d) / n, x.shape).copy(),)


@_register("affine")
class _Affine:
    @staticmethod
    def forward(xs, a):
        return ops.affine(*xs), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        x, w, _ = xs
        gx = g @ w
        gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(xs, a):
        return ops.softmax(xs[0]), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


@_register("add")
class _Add:
    @staticmethod
    def forward(xs, a):
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"add shape mismatch {xs[0].shape} vs {xs[1].shape}")
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        return g, g


@_register("mul")
class _Mul:
    @staticmethod
    def forward(xs, a):
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"mul shape mismatch {xs[0].shape} vs {xs[1].shape}")
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        return g * xs[1], g * xs[0]


@_register("sum")
class _Sum:
    @staticmethod
    def forward(xs, a):
        return np.asarray(np.sum(xs[0]), dtype=DTYPE), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        return (np.full(xs[0].shape, float(g), dtype=DTYPE),)


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(xs, a):
        return xs[0].reshape(a["shape"]), None

    @staticmethod
    def backward(g, xs, out, ctx, a):
        return (g.reshape(xs[0].shape),)


@_register("consensus")
class _Consensus:
    """Segmental consensus over the second-to-last axis: ``(..., K, C) -> (..., C)``."""

    @staticmethod
    def forward(xs, a):
        x = xs[0]
        kind = a["kind"]
        if kind == "average":
            return x.mean(axis=-2), None
        if kind == "max":
            # argmax picks the lowest index on ties
            idx = np.argmax(x, axis=-2)
            return np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :], idx
        if kind == "weighted_average":
            w = np.asarray(a["weights"], dtype=DTYPE)
            return np.einsum("...kc,k->...c", x, w), None
        raise ContractError(f"unknown consensus kind {kind!r}")

    @staticmethod
    def backward(g, xs, out, idx, a):
        x = xs[0]
        kind = a["kind"]
        k = x.shape[-2]
        if kind == "average":
            return (np.broadcast_to(g[..., None, :] / k, x.shape).copy(),)
        if kind == "max":
            mask = np.arange(k)[:, None] == idx[..., None, :]
            return (np.where(mask, g[..., None, :], 0.0),)
        w = np.asarray(a["weights"], dtype=DTYPE)
        return (g[..., None, :] * w[:, None],)


@_register("cross_entropy")
class _CrossEntropy:
    """Mean over leading axes of ``-sum_i y_i (G_i - logsumexp(G))``."""

    @staticmethod
    def forward(xs, a):
        logits, y = xs
        logp = ops.log_softmax(logits)
        n = logits.size // logits.shape[-1]
        return np.asarray(-np.sum(y * logp) / n, dtype=DTYPE), logp

    @staticmethod
    def backward(g, xs, out, logp, a):
        logits, y = xs
        n = logits.size // logits.shape[-1]
        p = np.exp(logp)
        # one-hot rows: d/dG of -sum y (G - lse) = softmax(G) * sum(y) - y
        return float(g) * (p * y.sum(axis=-1, keepdims=True) - y) / n, None


class OpGraph:
    """An ordered, acyclic list of primitive ops over named inputs and parameters."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.output: int | None = None
        self._values: list[np.ndarray] | None = None
        self._ctx: list[Any] | None = None

    # -- construction -----------------------------------------------------

    def _add(self, node: Node) -> int:
        for ref in node.inputs:
            if not 0 <= ref < len(self.nodes):
                raise ContractError(f"node input {ref} does not refer to an earlier node")
        self.nodes.append(node)
        self.output = len(self.nodes) - 1
        self._values = None
        return self.output

    def input(self, name: str) -> int:
        return self._add(Node("input", (), name=name))

    def parameter(self, name: str, value=None, trainable: bool = True) -> int:
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        self.params[name] = None if value is None else as_tensor(value).copy()
        if not trainable:
            self.frozen.add(name)
        return self._add(Node("param", (), name=name))

    def apply(self, op: str, *refs: int, **attrs) -> int:
        if op not in _OPS:
            raise ContractError(f"unknown op {op!r}")
        return self._add(Node(op, tuple(refs), attrs))

    def conv2d(self, x, k, stride=1, padding=0):
        return self.apply("conv", x, k, stride=stride, padding=padding)

    def conv3d(self, x, k, stride=1, padding=0):
        return self.apply("conv", x, k, stride=stride, padding=padding)

    def bias(self, x, b, ndim):
        return self.apply("bias", x, b, ndim=ndim)

    def relu(self, x):
        return self.apply("relu", x)

    def max_pool(self, x, window, stride=None):
        window = tuple(window)
        return self.apply("max_pool", x, window=window, stride=tuple(stride or window))

    def global_avg_pool(self, x, ndim):
        return self.apply("global_avg_pool", x, ndim=ndim)

    def affine(self, x, w, b):
        return self.apply("affine", x, w, b)

    def softmax(self, x):
        return self.apply("softmax", x)

    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def sum(self, x):
        return self.apply("sum", x)

    def reshape(self, x, shape):
        return self.apply("reshape", x, shape=tuple(shape))

    def consensus(self, x, kind="average", weights=None):
        return self.apply("consensus", x, kind=kind, weights=weights)

    def cross_entropy(self, logits, target):
        return self.apply("cross_entropy", logits, target)

    # -- execution --------------------------------------------------------

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def forward(self, **feed) -> np.ndarray:
        """Execute every node; returns the value of the output node."""
        if self.output is None:
            raise StateError("empty graph")
        values: list[np.ndarray] = []
        ctx: list[Any] = []
        for node in self.nodes:
            if node.op == "input":
                if node.name not in feed:
                    raise ContractError(f"missing graph input {node.name!r}")
                values.append(as_tensor(feed[node.name]))
                ctx.append(None)
            elif node.op == "param":
                value = self.params[node.name]
                if value is None:
                    raise StateError(f"parameter {node.name!r} has no value")
                values.append(value)
                ctx.append(None)
            else:
                fwd = _OPS[node.op][0]
                out, c = fwd([values[i] for i in node.inputs], node.attrs)
                values.append(out)
                ctx.append(c)
        self._values, self._ctx = values, ctx
        return values[self.output]

    def value(self, ref: int) -> np.ndarray:
        if self._values is None:
            raise StateError("graph has not been executed")
        return self._values[ref]


def backward(graph: OpGraph, loss_grad=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the last forward pass.

    ``loss_grad`` seeds the output node; it may be omitted when the output is
    a scalar (seed 1). Returns one gradient per trainable parameter.
    """
    if graph._values is None:
        raise StateError("backward called before forward")
    values, ctx = graph._values, graph._ctx
    out_val = values[graph.output]
    if loss_grad is None:
        if out_val.size != 1:
            raise ContractError("loss_grad is required for a non-scalar output")
        loss_grad = np.ones_like(out_val)
    loss_grad = as_tensor(loss_grad)
    if loss_grad.shape != out_val.shape:
        raise ShapeError(f"loss_grad shape {loss_grad.shape} != output shape {out_val.shape}")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[graph.output] = loss_grad
    for i in range(graph.output, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.op in ("input", "param"):
            continue
        bwd = _OPS[node.op][1]
        in_grads = bwd(g, [values[j] for j in node.inputs], values[i], ctx[i], node.attrs)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj

    result = {}
    for i, node in enumerate(graph.nodes):
        if node.op == "param" and node.name not in graph.frozen:
            g = grads[i]
            result[node.name] = np.zeros_like(graph.params[node.name]) if g is None else g
    return result


def finite_difference_check(graph: OpGraph, inputs: dict, epsilon: float = 1e-5) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    Every coordinate of every trainable parameter is perturbed by
    ``+/- epsilon``; the relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. Frozen parameters are skipped.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError("epsilon must lie in (0, 1e-2]")
    loss = graph.forward(**inputs)
    if np.asarray(loss).size != 1:
        raise ContractError("finite_difference_check needs a scalar loss")
    for name in graph.trainable:
        if not np.all(np.isfinite(graph.params[name])):
            raise ContractError(f"parameter {name!r} is not finite")
    analytic = backward(graph)

    worst = 0.0
    for name in graph.trainable:
        p = graph.params[name]
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = float(graph.forward(**inputs))
            flat[j] = orig - epsilon
            lm = float(graph.forward(**inputs))
            flat[j] = orig
            num = (lp - lm) / (2 * epsilon)
            denom = max(abs(ga[j]), abs(num), 1e-8)
            worst = max(worst, abs(ga[j] - num) / denom)
    # leave the graph holding the unperturbed execution
    graph.forward(**inputs)
    return worst
