"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every op eagerly computes its value and
records its parents. ``backward`` accumulates numeric adjoints for the
parameters reachable from a scalar root. ``grad_wrt_input`` instead builds
the derivative of a scalar root with respect to a leaf *as a new graph*,
assembled from the same primitive ops, so a later ``backward`` over that
node yields mixed second derivatives. This is what lets the monotone
cumulative-intensity head be trained through its own time derivative while
the engine stays first-order internally.

Everything is float64; single precision does not survive the nested
derivative chains within the gradient-check budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class GraphError(Exception):
    """Base class for autodiff contract violations."""


class ShapeError(GraphError):
    def __init__(self, op: str, shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"op '{op}': incompatible shapes {self.shapes}")


class DomainError(GraphError):
    """Input outside an op's documented domain (e.g. log of x <= 0)."""


def as_tensor(data) -> Array:
    """Coerce to a float64 ndarray (the engine's tensor representation)."""
    return np.asarray(data, dtype=np.float64)


def check_finite(arr: Array, what: str = "tensor") -> Array:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains NaN/Inf")
    return arr


@dataclass
class Parameter:
    """A named trainable tensor. Ids must be unique within a model."""

    id: str
    tensor: Array
    requires_grad: bool = True

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor)


class Node:
    """One vertex of the computation DAG.

    ``value`` is the eagerly computed forward result; ``adjoint`` is filled
    by ``backward``. ``meta`` carries op-specific attributes (slice bounds,
    reduction axis, ...). Leaves carry either a ``param_id`` or no parents.
    """

    __slots__ = ("op", "parents", "value", "meta", "param_id", "adjoint")

    def __init__(self, op: str, parents: tuple, value: Array, meta=None, param_id=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.meta = meta
        self.param_id = param_id
        self.adjoint = None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def constant(data) -> Node:
    return Node("const", (), as_tensor(data))


class Graph:
    """Per-build leaf factory: memoizes one leaf node per parameter id.

    A parameter used several times in one graph must map to a single leaf
    so its adjoint accumulates correctly.
    """

    def __init__(self, params: dict[str, Parameter]):
        self.params = params
        self._leaves: dict[str, Node] = {}

    def leaf(self, param_id: str) -> Node:
        node = self._leaves.get(param_id)
        if node is None:
            p = self.params[param_id]
            node = Node("leaf", (), p.tensor, param_id=param_id)
            self._leaves[param_id] = node
        return node

    def input(self, data) -> Node:
        """A differentiable non-parameter leaf (e.g. the gap input of the
        monotone head, targeted by grad_wrt_input)."""
        return Node("input", (), as_tensor(data))

    def constant(self, data) -> Node:
        return constant(data)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def _unary(op: str, x: Node, value: Array) -> Node:
    return Node(op, (x,), value)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError("matmul", (a.value.shape, b.value.shape))
    return Node("matmul", (a, b), a.value @ b.value)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError("add", (a.value.shape, b.value.shape))
    return Node("add", (a, b), a.value + b.value)


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError("sub", (a.value.shape, b.value.shape))
    return Node("sub", (a, b), a.value - b.value)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError("mul", (a.value.shape, b.value.shape))
    return Node("mul", (a, b), a.value * b.value)


def neg(x: Node) -> Node:
    return _unary("neg", x, -x.value)


def exp(x: Node) -> Node:
    return _unary("exp", x, np.exp(x.value))


def log(x: Node) -> Node:
    if np.any(x.value <= 0.0):
        raise DomainError(f"op 'log': non-positive input (min={x.value.min()!r}); "
                          "clamp probabilities before taking logs")
    return _unary("log", x, np.log(x.value))


def square(x: Node) -> Node:
    return _unary("square", x, x.value * x.value)


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Node) -> Node:
    return _unary("sigmoid", x, _sigmoid(x.value))


def tanh(x: Node) -> Node:
    return _unary("tanh", x, np.tanh(x.value))


def softplus(x: Node) -> Node:
    # logaddexp(0, x) = ln(1 + e^x), stable on both tails
    return _unary("softplus", x, np.logaddexp(0.0, x.value))


def relu(x: Node) -> Node:
    return _unary("relu", x, np.maximum(x.value, 0.0))


def softmax(x: Node) -> Node:
    v = x.value
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _unary("softmax", x, e / e.sum(axis=-1, keepdims=True))


def reduce_sum(x: Node, axis: int | None = None) -> Node:
    # axis reductions keep dims so VJPs are plain broadcasts
    value = x.value.sum() if axis is None else x.value.sum(axis=axis, keepdims=True)
    return Node("sum", (x,), np.asarray(value), meta=axis)


def reduce_mean(x: Node, axis: int | None = None) -> Node:
    value = x.value.mean() if axis is None else x.value.mean(axis=axis, keepdims=True)
    return Node("mean", (x,), np.asarray(value), meta=axis)


def concat(nodes, axis: int = -1) -> Node:
    nodes = tuple(nodes)
    values = [n.value for n in nodes]
    try:
        value = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeError("concat", [v.shape for v in values])
    axis = axis % value.ndim
    sizes = tuple(v.shape[axis] for v in values)
    return Node("concat", nodes, value, meta=(axis, sizes))


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    axis = axis % x.value.ndim
    idx = tuple(slice(start, stop) if d == axis else slice(None)
                for d in range(x.value.ndim))
    return Node("slice", (x,), x.value[idx], meta=(axis, start, stop))


def broadcast_to(x: Node, shape) -> Node:
    # scalar or equal-rank broadcasts only, so the reverse is a plain
    # keepdims sum over the expanded axes
    shape = tuple(shape)
    if x.value.ndim not in (0, len(shape)):
        raise ShapeError("broadcast", (x.value.shape, shape))
    try:
        value = np.ascontiguousarray(np.broadcast_to(x.value, shape))
    except ValueError:
        raise ShapeError("broadcast", (x.value.shape, shape))
    return Node("broadcast", (x,), value, meta=x.value.shape)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError("transpose", (x.value.shape,))
    return Node("transpose", (x,), np.ascontiguousarray(x.value.T))


_FORWARD = {
    "matmul": matmul, "add": add, "mul": mul, "sub": sub, "neg": neg,
    "exp": exp, "log": log, "square": square, "sigmoid": sigmoid,
    "tanh": tanh, "softplus": softplus, "relu": relu, "softmax": softmax,
    "sum": reduce_sum, "mean": reduce_mean, "concat": concat,
    "slice": slice_axis, "broadcast": broadcast_to, "transpose": transpose,
}


def forward_op(tag: str, inputs, **kwargs) -> Node:
    """Tag-dispatched op construction (same functions as the direct API)."""
    if tag not in _FORWARD:
        raise GraphError(f"unknown op tag {tag!r}")
    if tag in ("concat",):
        return _FORWARD[tag](inputs, **kwargs)
    return _FORWARD[tag](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# numeric backward
# ---------------------------------------------------------------------------

def _unbroadcast(grad: Array, shape: tuple) -> Array:
    # sum gradient over axes that were expanded by broadcasting
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _vjp_num(node: Node, g: Array) -> list:
    """Numeric vector-Jacobian product: adjoint contributions per parent."""
    op = node.op
    p = node.parents
    if op == "matmul":
        return [g @ p[1].value.T, p[0].value.T @ g]
    if op == "add":
        return [g, g]
    if op == "sub":
        return [g, -g]
    if op == "mul":
        return [g * p[1].value, g * p[0].value]
    if op == "neg":
        return [-g]
    if op == "exp":
        return [g * node.value]
    if op == "log":
        return [g / p[0].value]
    if op == "square":
        return [g * (2.0 * p[0].value)]
    if op == "sigmoid":
        return [g * node.value * (1.0 - node.value)]
    if op == "tanh":
        return [g * (1.0 - node.value * node.value)]
    if op == "softplus":
        return [g * _sigmoid(p[0].value)]
    if op == "relu":
        return [g * (p[0].value > 0.0)]
    if op == "softmax":
        y = node.value
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]
    if op == "sum":
        return [np.broadcast_to(g, p[0].value.shape)]
    if op == "mean":
        axis = node.meta
        n = p[0].value.size if axis is None else p[0].value.shape[axis]
        return [np.broadcast_to(g / n, p[0].value.shape)]
    if op == "concat":
        axis, sizes = node.meta
        grads, start = [], 0
        for s in sizes:
            idx = tuple(slice(start, start + s) if d == axis else slice(None)
                        for d in range(g.ndim))
            grads.append(g[idx])
            start += s
        return grads
    if op == "slice":
        axis, start, stop = node.meta
        out = np.zeros_like(p[0].value)
        idx = tuple(slice(start, stop) if d == axis else slice(None)
                    for d in range(out.ndim))
        out[idx] = g
        return [out]
    if op == "broadcast":
        return [_unbroadcast(g, node.meta)]
    if op == "transpose":
        return [g.T]
    raise GraphError(f"no numeric VJP for op {op!r}")


def toposort(root: Node) -> list:
    """Parents-before-children order, iterative (graphs outgrow recursion)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[str, Array]:
    """Accumulate adjoints from a scalar root; return parameter gradients.

    Adjoints are (re)initialized on every call, so repeated calls on a
    fresh graph are deterministic.
    """
    if root.value.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = toposort(root)
    for node in order:
        node.adjoint = None
    root.adjoint = np.ones_like(root.value)
    grads: dict[str, Array] = {}
    for node in reversed(order):
        g = node.adjoint
        if g is None:
            continue
        if node.param_id is not None:
            grads[node.param_id] = g
            continue
        if not node.parents:
            continue
        for parent, contrib in zip(node.parents, _vjp_num(node, g)):
            if parent.adjoint is None:
                parent.adjoint = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.adjoint += contrib
    return grads


# ---------------------------------------------------------------------------
# symbolic derivative graphs
# ---------------------------------------------------------------------------

def _vjp_sym(node: Node, g: Node, need: list) -> list:
    """Adjoint contributions as graph nodes, only for parents flagged in
    ``need`` (parents that transitively depend on the differentiation
    target); others get None so inactive branches are never materialized.
    """
    op = node.op
    p = node.parents

    def const_of(n):
        return constant(n.value)

    if op == "matmul":
        out = [None, None]
        if need[0]:
            out[0] = matmul(g, transpose(p[1]))
        if need[1]:
            out[1] = matmul(transpose(p[0]), g)
        return out
    if op == "add":
        return [g if need[0] else None, g if need[1] else None]
    if op == "sub":
        return [g if need[0] else None, neg(g) if need[1] else None]
    if op == "mul":
        return [mul(g, p[1]) if need[0] else None,
                mul(g, p[0]) if need[1] else None]
    if op == "neg":
        return [neg(g)]
    if op == "exp":
        return [mul(g, node)]
    if op == "log":
        # 1/x == exp(-log x); the log node itself is the exponent
        return [mul(g, exp(neg(node)))]
    if op == "square":
        return [mul(g, add(p[0], p[0]))]
    if op == "sigmoid":
        one = constant(np.ones_like(node.value))
        return [mul(g, mul(node, sub(one, node)))]
    if op == "tanh":
        one = constant(np.ones_like(node.value))
        return [mul(g, sub(one, square(node)))]
    if op == "softplus":
        return [mul(g, sigmoid(p[0]))]
    if op == "relu":
        return [mul(g, constant((p[0].value > 0.0).astype(np.float64)))]
    if op == "softmax":
        inner = reduce_sum(mul(g, node), axis=-1)
        return [mul(node, sub(g, broadcast_to(inner, node.value.shape)))]
    if op == "sum":
        return [broadcast_to(g, p[0].value.shape)]
    if op == "mean":
        axis = node.meta
        n = p[0].value.size if axis is None else p[0].value.shape[axis]
        scale = constant(np.full(p[0].value.shape, 1.0 / n))
        return [mul(broadcast_to(g, p[0].value.shape), scale)]
    if op == "concat":
        axis, sizes = node.meta
        out, start = [], 0
        for s, needed in zip(sizes, need):
            out.append(slice_axis(g, axis, start, start + s) if needed else None)
            start += s
        return out
    if op == "slice":
        axis, start, stop = node.meta
        full = p[0].value.shape
        pieces = []
        if start > 0:
            before = list(full)
            before[axis] = start
            pieces.append(constant(np.zeros(before)))
        pieces.append(g)
        if stop < full[axis]:
            after = list(full)
            after[axis] = full[axis] - stop
            pieces.append(constant(np.zeros(after)))
        return [concat(pieces, axis=axis) if len(pieces) > 1 else g]
    if op == "broadcast":
        src_shape = node.meta
        if len(src_shape) == 0:
            return [reduce_sum(g)]
        h = g
        for ax, s in enumerate(src_shape):
            if s == 1 and node.value.shape[ax] != 1:
                h = reduce_sum(h, axis=ax)
        return [h]
    raise GraphError(f"no symbolic VJP for op {op!r} "
                     "(not expected on a derivative path)")


def grad_wrt_input(root: Node, target: Node) -> Node:
    """Build ∂root/∂target as a new graph node sharing the forward graph.

    ``root`` must be scalar and ``target`` a leaf. Rows of a batched leaf
    that the root touches only additively (e.g. sum over independent rows)
    yield the per-row derivative, which is how the per-interval intensity
    is obtained in one pass.
    """
    if root.value.size != 1:
        raise GraphError(f"grad_wrt_input requires a scalar root, got shape {root.value.shape}")
    if target.parents:
        raise GraphError("grad_wrt_input target must be a leaf node")
    order = toposort(root)
    ids = {id(n) for n in order}
    if id(target) not in ids:
        raise GraphError("target is not part of the root's graph")

    active = {id(target)}
    for node in order:
        if id(node) in active:
            continue
        if any(id(par) in active for par in node.parents):
            active.add(id(node))

    if id(root) not in active:
        return constant(np.zeros_like(target.value))

    sym: dict[int, Node] = {id(root): constant(np.ones_like(root.value))}
    for node in reversed(order):
        g = sym.get(id(node))
        if g is None or not node.parents or id(node) not in active:
            continue
        need = [id(par) in active for par in node.parents]
        for parent, contrib in zip(node.parents, _vjp_sym(node, g, need)):
            if contrib is None:
                continue
            prev = sym.get(id(parent))
            sym[id(parent)] = contrib if prev is None else add(prev, contrib)
    return sym[id(target)]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Parameter], grads: dict[str, Array],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              max_grad_norm: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Moments are created lazily (zeros) on first sight of a parameter.
    ``max_grad_norm`` optionally rescales the global gradient norm first.
    """
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ValueError("beta1, beta2 must lie in (0, 1)")
    if max_grad_norm is not None:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > max_grad_norm:
            scale = max_grad_norm / total
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    t = state.step
    for pid, g in grads.items():
        p = params[pid]
        if not p.requires_grad:
            continue
        if p.tensor.shape != g.shape:
            raise ShapeError("adam_step", (p.tensor.shape, g.shape))
        m = state.m.setdefault(pid, np.zeros_like(p.tensor))
        v = state.v.setdefault(pid, np.zeros_like(p.tensor))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.tensor = p.tensor - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
