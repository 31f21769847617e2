"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Graph`` is a Wengert list: every op appends a ``Node`` holding its value and a
closure that pushes the node's gradient to its parents. ``Graph.backward`` walks
the list in exact reverse order, so gradients of nodes with several consumers
accumulate additively.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from errors import ContractError, DimensionError, NumericError, IndexOutOfRange

# ------------------------------
# Graph
# ------------------------------

class Node:
    __slots__ = ("graph", "id", "op", "parents", "value", "grad", "backward_fn", "name")

    def __init__(self, graph: "Graph", nid: int, op: str, parents: Sequence["Node"],
                 value: np.ndarray, backward_fn: Optional[Callable[[np.ndarray], None]],
                 name: Optional[str] = None):
        self.graph = graph
        self.id = nid
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != ():
            raise ContractError(f"item() needs a scalar node, got shape {self.value.shape}")
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({self.id}, {label}, shape={self.value.shape})"


class Graph:
    """Operation record for one forward/backward pass.

    Parameters are cached by name, so repeated forward passes over the same
    ``ModelParams`` (one per ablated submodel) share their parameter nodes and
    their gradients add up.
    """

    def __init__(self, track_kinks: bool = False):
        self.nodes: List[Node] = []
        self.params: Dict[str, Node] = {}
        self.track_kinks = track_kinks
        self.kinks: List[np.ndarray] = []
        self._backward_done = False

    def record(self, op: str, value, parents: Sequence[Node] = (),
               backward_fn: Optional[Callable[[np.ndarray], None]] = None,
               name: Optional[str] = None) -> Node:
        for p in parents:
            if p.graph is not self:
                raise ContractError(f"{op}: parent node belongs to another graph")
        node = Node(self, len(self.nodes), op, parents,
                    np.asarray(value, dtype=np.float64), backward_fn, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: Optional[str] = None) -> Node:
        return self.record("const", np.array(value, dtype=np.float64, copy=True), name=name)

    def parameter(self, name: str, value) -> Node:
        node = self.params.get(name)
        if node is None:
            node = self.record("param", np.array(value, dtype=np.float64, copy=True), name=name)
            self.params[name] = node
        return node

    def note_kink(self, pattern) -> None:
        if self.track_kinks:
            self.kinks.append(np.array(pattern, copy=True))

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        if self._backward_done:
            raise ContractError("backward already ran on this graph; build a new Graph")
        if loss.graph is not self:
            raise ContractError("backward root belongs to another graph")
        if loss.value.shape != ():
            raise ContractError(f"backward needs a scalar root, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.backward_fn is not None:
                node.backward_fn(node.grad)
        self._backward_done = True
        return self.gradients()

    def gradients(self) -> Dict[str, np.ndarray]:
        if not self._backward_done:
            raise ContractError("gradients requested before backward")
        return {name: node.grad for name, node in self.params.items()}


def _graph_of(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ContractError("operands belong to different graphs")
    return g


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)

# ------------------------------
# Linear algebra
# ------------------------------

def affine(x: Node, W: Node, bias: Node) -> Node:
    """y = xW + bias, bias broadcast over rows."""
    g = _graph_of(x, W, bias)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError("affine", x.shape, W.shape)
    if bias.shape != (W.shape[1],):
        raise DimensionError("affine", W.shape, bias.shape)

    def back(gy):
        x.grad += gy @ W.value.T
        W.grad += x.value.T @ gy
        bias.grad += gy.sum(axis=0)

    return g.record("affine", x.value @ W.value + bias.value, (x, W, bias), back)


def matmul(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def back(gy):
        a.grad += gy @ b.value.T
        b.grad += a.value.T @ gy

    return g.record("matmul", a.value @ b.value, (a, b), back)


def matvec(M: Node, v: Node) -> Node:
    g = _graph_of(M, v)
    if M.value.ndim != 2 or v.value.ndim != 1 or M.shape[1] != v.shape[0]:
        raise DimensionError("matvec", M.shape, v.shape)

    def back(gy):
        M.grad += np.outer(gy, v.value)
        v.grad += M.value.T @ gy

    return g.record("matvec", M.value @ v.value, (M, v), back)


def dot(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    if a.value.ndim != 1 or a.shape != b.shape:
        raise DimensionError("dot", a.shape, b.shape)

    def back(gy):
        a.grad += gy * b.value
        b.grad += gy * a.value

    return g.record("dot", np.dot(a.value, b.value), (a, b), back)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise DimensionError("transpose", x.shape, ("rows", "cols"))

    def back(gy):
        x.grad += gy.T

    return x.graph.record("transpose", x.value.T.copy(), (x,), back)


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.value.size:
        raise DimensionError("reshape", x.shape, shape)

    def back(gy):
        x.grad += gy.reshape(x.shape)

    return x.graph.record("reshape", x.value.reshape(shape).copy(), (x,), back)

# ------------------------------
# Elementwise
# ------------------------------

def add(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    _same_shape("add", a, b)

    def back(gy):
        a.grad += gy
        b.grad += gy

    return g.record("add", a.value + b.value, (a, b), back)


def sub(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    _same_shape("sub", a, b)

    def back(gy):
        a.grad += gy
        b.grad -= gy

    return g.record("sub", a.value - b.value, (a, b), back)


def mul(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    _same_shape("mul", a, b)

    def back(gy):
        a.grad += gy * b.value
        b.grad += gy * a.value

    return g.record("mul", a.value * b.value, (a, b), back)


def scale(x: Node, s: float) -> Node:
    s = float(s)

    def back(gy):
        x.grad += s * gy

    return x.graph.record("scale", s * x.value, (x,), back)


def relu(x: Node) -> Node:
    # subgradient at exactly 0 is 0; NaN passes through
    active = x.value > 0
    x.graph.note_kink(active)

    def back(gy):
        x.grad += gy * active

    return x.graph.record("relu", np.maximum(x.value, 0.0), (x,), back)


def apply_mask(x: Node, mask) -> Node:
    """Elementwise product with a constant mask (0 or a survivor scale)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise DimensionError("apply_mask", x.shape, m.shape)
    if (m < 0).any():
        raise ContractError("apply_mask: mask values must be nonnegative")

    def back(gy):
        x.grad += gy * m

    return x.graph.record("mask", x.value * m, (x,), back)

# ------------------------------
# Reductions and lookups
# ------------------------------

def reduce_sum(x: Node) -> Node:
    def back(gy):
        x.grad += gy

    return x.graph.record("sum", np.sum(x.value), (x,), back)


def mean_rows(x: Node) -> Node:
    """Mean-pool a [n, d] tensor over rows."""
    if x.value.ndim != 2 or x.shape[0] == 0:
        raise DimensionError("mean_rows", x.shape, ("n>0", "d"))
    n = x.shape[0]

    def back(gy):
        x.grad += np.broadcast_to(gy / n, x.shape)

    return x.graph.record("mean_rows", x.value.mean(axis=0), (x,), back)


def weighted_sum(nodes: Sequence[Node], weights: Sequence[float]) -> Node:
    """Sum_i w_i * n_i over scalar nodes; weights are constants."""
    if len(nodes) != len(weights) or not nodes:
        raise ContractError(f"weighted_sum: {len(nodes)} nodes vs {len(weights)} weights")
    g = _graph_of(*nodes)
    for n in nodes:
        if n.value.shape != ():
            raise ContractError(f"weighted_sum expects scalar nodes, got {n.shape}")
    w = [float(v) for v in weights]
    total = 0.0
    for wi, n in zip(w, nodes):
        total += wi * float(n.value)

    def back(gy):
        for wi, n in zip(w, nodes):
            n.grad += wi * gy

    return g.record("weighted_sum", total, tuple(nodes), back)


def mean(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ContractError("mean of an empty node list")
    g = _graph_of(*nodes)
    k = len(nodes)
    total = 0.0
    for n in nodes:
        total += float(n.value)

    def back(gy):
        for n in nodes:
            n.grad += gy / k

    return g.record("mean", total / k, tuple(nodes), back)


def embedding(table: Node, ids: Sequence[int]) -> Node:
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexOutOfRange(f"embedding: id out of range [0, {vocab})")

    def back(gy):
        np.add.at(table.grad, idx, gy)

    return table.graph.record("embedding", table.value[idx], (table,), back)

# ------------------------------
# Normalizations and losses
# ------------------------------

def softmax_rows(x: Node) -> Node:
    if x.value.ndim != 2:
        raise DimensionError("softmax_rows", x.shape, ("rows", "cols"))
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def back(gy):
        x.grad += s * (gy - (gy * s).sum(axis=1, keepdims=True))

    return x.graph.record("softmax", s, (x,), back)


def l2_normalize(v: Node, delta: float = 1e-12) -> Node:
    if v.value.ndim != 1:
        raise DimensionError("l2_normalize", v.shape, ("d",))
    norm = float(np.sqrt(np.dot(v.value, v.value)))
    denom = max(norm, delta)
    y = v.value / denom

    def back(gy):
        if norm > delta:
            v.grad += (gy - y * np.dot(y, gy)) / denom
        else:
            v.grad += gy / denom

    return v.graph.record("l2_normalize", y, (v,), back)


def log_sum_exp(z: np.ndarray) -> float:
    """Max-shifted log-sum-exp, accurate when one logit dominates."""
    top = int(np.argmax(z))
    shifted = z - z[top]
    rest = np.exp(np.delete(shifted, top)).sum()
    return float(z[top] + np.log1p(rest))


def softmax_cross_entropy(logits: Node, target: int) -> Node:
    """-log softmax(logits)[target] for a single logit vector."""
    if logits.value.ndim != 1 or logits.shape[0] == 0:
        raise DimensionError("softmax_cross_entropy", logits.shape, ("k",))
    k = logits.shape[0]
    t = int(target)
    if not 0 <= t < k:
        raise IndexOutOfRange(f"softmax_cross_entropy: target {t} outside [0, {k})")
    z = logits.value
    lse = log_sum_exp(z)
    probs = np.exp(z - lse)

    def back(gy):
        grad = probs.copy()
        grad[t] -= 1.0
        logits.grad += gy * grad

    return logits.graph.record("softmax_ce", lse - z[t], (logits,), back)

# ------------------------------
# Gradient checking
# ------------------------------

def _evaluate(f: Callable[[Graph, List[Node]], Node], params: Sequence[np.ndarray], track: bool):
    g = Graph(track_kinks=track)
    nodes = [g.parameter(f"arg{k}", p) for k, p in enumerate(params)]
    out = f(g, nodes)
    if out.value.shape != ():
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.value):
        raise NumericError(f"grad_check: f evaluated to {float(out.value)}")
    return g, nodes, out


def _same_kinks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[Graph, List[Node]], Node], params: Sequence[np.ndarray],
               eps: float = 1e-5, n_coords: int = 100, seed: int = 0, floor: float = 1e-8,
               analytic: Optional[Sequence[np.ndarray]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(graph, nodes)`` builds a scalar from parameter nodes created for ``params``.
    Coordinates whose perturbation flips a ReLU or hinge (the graph's recorded
    kink pattern differs between +eps and -eps) are skipped.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    base = [np.array(p, dtype=np.float64, copy=True) for p in params]
    g, nodes, out = _evaluate(f, base, track=False)
    if analytic is None:
        g.backward(out)
        analytic = [n.grad for n in nodes]
    analytic = [np.asarray(a, dtype=np.float64) for a in analytic]
    for a, p in zip(analytic, base):
        if a.shape != p.shape:
            raise DimensionError("grad_check", p.shape, a.shape)

    sizes = np.array([p.size for p in base])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        plus = [p.copy() for p in base]
        minus = [p.copy() for p in base]
        plus[k].flat[idx] += eps
        minus[k].flat[idx] -= eps
        gp, _, fp = _evaluate(f, plus, track=True)
        gm, _, fm = _evaluate(f, minus, track=True)
        if not _same_kinks(gp.kinks, gm.kinks):
            continue
        numeric = (float(fp.value) - float(fm.value)) / (2.0 * eps)
        a = float(analytic[k].flat[idx])
        err = abs(a - numeric) / max(abs(a), floor)
        worst = max(worst, err)
    return worst
