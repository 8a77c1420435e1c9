"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the primitives the prompt-tuning objective needs are provided. There
is no general broadcasting: a 1-D operand may be added to every row of a
2-D operand (the bias pattern), and everything else must match exactly.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeError

__all__ = [
    "Node",
    "as_node",
    "leaf",
    "constant",
    "affine",
    "tanh",
    "add",
    "sub",
    "scale",
    "add_scalar",
    "concat",
    "stack",
    "take_rows",
    "mean",
    "total",
    "l2_normalize",
    "dot",
    "softmax",
    "log_softmax",
    "kl_logits",
    "weighted_sum",
    "backward",
    "zero_grad",
    "grad_check",
]


class Node:
    """A value in the graph together with its accumulated gradient.

    ``parents`` holds ``(node, vjp)`` pairs where ``vjp`` maps the upstream
    gradient of this node to the gradient contribution for that parent.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "op")

    def __init__(self, value, parents=(), requires_grad=False, op="leaf"):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents: list[tuple[Node, Callable[[np.ndarray], np.ndarray]]] = list(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def leaf(value) -> Node:
    """A learnable input; gradients accumulate into ``.grad``."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def _make(value, parents, op) -> Node:
    # parents that cannot carry gradient are dropped so backward never visits them
    live = [(p, f) for p, f in parents if p.requires_grad]
    node = Node(value, live, requires_grad=bool(live), op=op)
    return node


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------

def affine(x, w, b=None) -> Node:
    """``x @ w.T + b`` for ``x`` of shape (d,) or (n, d) and ``w`` of shape (m, d)."""
    x, w = as_node(x), as_node(w)
    _check(w.value.ndim == 2, f"affine: weight must be 2-D, got shape {w.shape}")
    _check(x.value.ndim in (1, 2), f"affine: input must be 1-D or 2-D, got shape {x.shape}")
    _check(x.shape[-1] == w.shape[1],
           f"affine: input width {x.shape[-1]} does not match weight shape {w.shape}")
    out = x.value @ w.value.T
    parents = [
        (x, lambda g: g @ w.value),
        (w, lambda g: np.outer(g, x.value) if x.value.ndim == 1 else g.T @ x.value),
    ]
    if b is not None:
        b = as_node(b)
        _check(b.shape == (w.shape[0],),
               f"affine: bias shape {b.shape} does not match output width {w.shape[0]}")
        out = out + b.value
        parents.append((b, lambda g: g if g.ndim == 1 else g.sum(axis=0)))
    return _make(out, parents, "affine")


def tanh(x) -> Node:
    x = as_node(x)
    t = np.tanh(x.value)
    return _make(t, [(x, lambda g: g * (1.0 - t * t))], "tanh")


def _broadcast_pair(a: Node, b: Node, op: str):
    if a.shape == b.shape:
        return lambda g: g, lambda g: g
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return lambda g: g, lambda g: g.sum(axis=0)
    if b.value.ndim == 2 and a.value.ndim == 1 and b.shape[1] == a.shape[0]:
        return lambda g: g.sum(axis=0), lambda g: g
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Node:
    """Elementwise sum; a 1-D operand is added to every row of a 2-D one."""
    a, b = as_node(a), as_node(b)
    ga, gb = _broadcast_pair(a, b, "add")
    return _make(a.value + b.value, [(a, ga), (b, gb)], "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    ga, gb = _broadcast_pair(a, b, "sub")
    return _make(a.value - b.value, [(a, ga), (b, lambda g: -gb(g))], "sub")


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, [(x, lambda g: g * c)], "scale")


def add_scalar(x, c: float) -> Node:
    x = as_node(x)
    return _make(x.value + float(c), [(x, lambda g: g)], "add_scalar")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    _check(len(nodes) > 0, "concat: nothing to concatenate")
    ndim = nodes[0].value.ndim
    _check(all(n.value.ndim == ndim for n in nodes), "concat: operands differ in rank")
    axis = axis % ndim
    for n in nodes:
        other = [s for i, s in enumerate(n.shape) if i != axis]
        ref = [s for i, s in enumerate(nodes[0].shape) if i != axis]
        _check(other == ref, f"concat: shapes {[m.shape for m in nodes]} differ off axis {axis}")
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        idx = [slice(None)] * ndim
        idx[axis] = slice(int(lo), int(hi))
        parents.append((n, lambda g, idx=tuple(idx): g[idx]))
    return _make(out, parents, "concat")


def stack(nodes: Sequence) -> Node:
    """Stack equally shaped nodes along a new leading axis."""
    nodes = [as_node(n) for n in nodes]
    _check(len(nodes) > 0, "stack: nothing to stack")
    _check(all(n.shape == nodes[0].shape for n in nodes),
           f"stack: shapes differ {[n.shape for n in nodes]}")
    out = np.stack([n.value for n in nodes])
    return _make(out, [(n, lambda g, i=i: g[i]) for i, n in enumerate(nodes)], "stack")


def take_rows(x, rows) -> Node:
    """Rows of ``x`` selected by integer index; a scalar index drops the axis."""
    x = as_node(x)
    rows = np.asarray(rows, dtype=np.intp)
    _check(rows.ndim <= 1, "take_rows: index must be a scalar or 1-D")
    _check(rows.size == 0 or (rows.min() >= -x.shape[0] and rows.max() < x.shape[0]),
           f"take_rows: index out of range for leading dimension {x.shape[0]}")

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, rows, g)
        return out

    return _make(x.value[rows], [(x, vjp)], "take_rows")


def mean(x, axis: int | None = None) -> Node:
    x = as_node(x)
    if axis is None:
        n = x.value.size
        return _make(x.value.mean(), [(x, lambda g: np.full_like(x.value, g / n))], "mean")
    axis = axis % x.value.ndim
    n = x.shape[axis]
    return _make(
        x.value.mean(axis=axis),
        [(x, lambda g: np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy())],
        "mean",
    )


def total(x) -> Node:
    x = as_node(x)
    return _make(x.value.sum(), [(x, lambda g: np.full_like(x.value, g))], "sum")


def l2_normalize(x) -> Node:
    """Scale each vector (the last axis) to unit Euclidean norm."""
    x = as_node(x)
    norm = np.linalg.norm(x.value, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise NonFiniteError("l2_normalize: zero vector has no direction")
    y = x.value / norm

    def vjp(g):
        return (g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm

    return _make(y, [(x, vjp)], "l2_normalize")


def dot(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check(a.value.ndim == 1 and a.shape == b.shape,
           f"dot: expected two vectors of equal length, got {a.shape} and {b.shape}")
    return _make(float(a.value @ b.value), [(a, lambda g: g * b.value), (b, lambda g: g * a.value)], "dot")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(z) -> Node:
    z = as_node(z)
    out = _log_softmax(z.value)
    p = np.exp(out)
    return _make(out, [(z, lambda g: g - p * g.sum(axis=-1, keepdims=True))], "log_softmax")


def softmax(z) -> Node:
    z = as_node(z)
    p = np.exp(_log_softmax(z.value))
    return _make(p, [(z, lambda g: p * (g - np.sum(g * p, axis=-1, keepdims=True)))], "softmax")


def kl_logits(p_logits, q_logits) -> Node:
    """KL(softmax(p_logits) || softmax(q_logits)) along the last axis.

    Returns a scalar for 1-D inputs and one value per row for 2-D inputs.
    Terms with p == 0 contribute exactly zero.
    """
    zp, zq = as_node(p_logits), as_node(q_logits)
    _check(zp.shape == zq.shape, f"kl_logits: shapes {zp.shape} and {zq.shape} differ")
    logp, logq = _log_softmax(zp.value), _log_softmax(zq.value)
    p, q = np.exp(logp), np.exp(logq)
    terms = np.where(p > 0.0, p * (logp - logq), 0.0)
    kl = terms.sum(axis=-1)

    def vjp_p(g):
        g = np.expand_dims(g, -1)
        return g * (terms - p * np.expand_dims(kl, -1))

    def vjp_q(g):
        return np.expand_dims(g, -1) * (q - p)

    return _make(kl, [(zp, vjp_p), (zq, vjp_q)], "kl_logits")


def weighted_sum(x, weights) -> Node:
    """``sum(weights * x)`` against a constant array of the same shape."""
    x = as_node(x)
    w = np.asarray(weights, dtype=np.float64)
    _check(w.shape == x.shape, f"weighted_sum: weight shape {w.shape} does not match {x.shape}")
    return _make(float(np.sum(w * x.value)), [(x, lambda g: g * w)], "weighted_sum")


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------

def _topological(output: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(output)/d(leaf) into every reachable leaf's ``.grad``.

    Interior gradients are kept local to the call, so zeroing the leaves
    between calls makes repeated passes give identical results.
    Returns a mapping from each reachable learnable leaf to its gradient.
    """
    if output.value.shape != ():
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones(())}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(_topological(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad += g
                leaves[node] = node.grad
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contrib
            else:
                grads[id(parent)] = contrib
    return leaves


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = np.zeros_like(n.value)


def grad_check(fn: Callable[..., Node], point: Sequence, h: float = 1e-5) -> float:
    """Largest relative disagreement between backward and central differences.

    ``fn`` receives one :class:`Node` per entry of ``point`` and must return a
    scalar node. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    point = [np.array(p, dtype=np.float64) for p in point]
    leaves = [leaf(p) for p in point]
    out = fn(*leaves)
    if out.shape != ():
        raise ShapeError("grad_check: function must return a scalar")
    if out.requires_grad:
        backward(out)
    analytic = [lf.grad for lf in leaves]

    def f(vals):
        v = fn(*[constant(a) for a in vals]).value
        if not np.isfinite(v):
            raise NonFiniteError("grad_check: function evaluated to a non-finite value")
        return float(v)

    worst = 0.0
    for i, p in enumerate(point):
        for idx in np.ndindex(p.shape):
            plus = [a.copy() for a in point]
            minus = [a.copy() for a in point]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric = (f(plus) - f(minus)) / (2.0 * h)
            a = analytic[i][idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
