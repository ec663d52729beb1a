"""Define-by-run reverse-mode differentiation over dense float64 vectors.

A :class:`Graph` records every operation applied to its tensors in
execution order, so the node list is already a topological order.  Graphs
are meant to be rebuilt on every optimisation step.

    >>> g = Graph()
    >>> x = g.leaf(np.array([3.0]))
    >>> y = sum_(x * x)
    >>> float(backward(g, y)[x.id][0])
    6.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

KINDS = (
    "affine",
    "matvec",
    "add",
    "mul",
    "scale",
    "sigmoid",
    "activation",
    "sum",
    "squared_norm",
    "log",
    "power",
)


class TapeError(Exception):
    """Base class for errors raised by the gradient engine."""


class ShapeError(TapeError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NonFiniteError(TapeError, FloatingPointError):
    def __init__(self, node_id: int, op: str, where: str = "forward"):
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite value in {where} pass at node {node_id} ({op})")


def stable_sigmoid(x):
    """Logistic function without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


ACTIVATIONS = ("leaky_relu", "relu", "tanh")


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


class Tensor:
    """Handle to a node value on a graph; values are treated as immutable."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.ravel()

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(self.graph, other), -1.0))

    def __rsub__(self, other):
        return add(_lift(self.graph, other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(self.graph, other))

    __rmul__ = __mul__

    def __pow__(self, k):
        return power(self, k)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, kind, inputs, value, attrs=None, requires_grad=False) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(len(self.nodes), kind)
        self.nodes.append(Node(kind, tuple(inputs), value, attrs or {}, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        """A parameter or input; gradients are reported for it."""
        return self._record("leaf", (), np.array(value, dtype=np.float64), requires_grad=requires_grad)

    def const(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def __len__(self):
        return len(self.nodes)


def _lift(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise TapeError("tensors belong to different graphs")
        return x
    return graph.const(x)


# forward rules: (values, attrs) -> value
def _f_affine(v, a):
    W, x, b = v
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError("affine", W.shape, x.shape, b.shape)
    return W @ x + b


def _f_matvec(v, a):
    W, x = v
    if W.ndim != 2 or x.shape != (W.shape[1],):
        raise ShapeError("matvec", W.shape, x.shape)
    return W @ x


def _f_add(v, a):
    if v[0].shape != v[1].shape:
        raise ShapeError("add", v[0].shape, v[1].shape)
    return v[0] + v[1]


def _f_mul(v, a):
    if v[0].shape != v[1].shape:
        raise ShapeError("mul", v[0].shape, v[1].shape)
    return v[0] * v[1]


def _f_activation(v, a):
    x = v[0]
    fn = a["fn"]
    if fn == "tanh":
        return np.tanh(x)
    if fn == "relu":
        return np.maximum(x, 0.0)
    return _leaky_relu(x, a["slope"])


def _f_log(v, a):
    if np.any(v[0] <= 0):
        raise TapeError(f"log: non-positive input {v[0].min()}")
    return np.log(v[0])


_FORWARD: dict[str, Callable] = {
    "affine": _f_affine,
    "matvec": _f_matvec,
    "add": _f_add,
    "mul": _f_mul,
    "scale": lambda v, a: a["factor"] * v[0],
    "sigmoid": lambda v, a: stable_sigmoid(v[0]),
    "activation": _f_activation,
    "sum": lambda v, a: np.sum(v[0]),
    "squared_norm": lambda v, a: np.dot(v[0].ravel(), v[0].ravel()),
    "log": _f_log,
    "power": lambda v, a: v[0] ** a["exponent"],
}


# backward rules: (input values, output value, upstream grad, attrs) -> input grads
def _b_affine(v, out, g, a):
    W, x, _ = v
    return np.outer(g, x), W.T @ g, g


def _b_matvec(v, out, g, a):
    W, x = v
    return np.outer(g, x), W.T @ g


def _b_activation(v, out, g, a):
    fn = a["fn"]
    if fn == "tanh":
        return (g * (1.0 - out * out),)
    if fn == "relu":
        return (g * (v[0] > 0),)
    return (g * np.where(v[0] > 0, 1.0, a["slope"]),)


def _b_power(v, out, g, a):
    k = a["exponent"]
    return (g * k * v[0] ** (k - 1),)


_BACKWARD: dict[str, Callable] = {
    "affine": _b_affine,
    "matvec": _b_matvec,
    "add": lambda v, out, g, a: (g, g),
    "mul": lambda v, out, g, a: (g * v[1], g * v[0]),
    "scale": lambda v, out, g, a: (a["factor"] * g,),
    "sigmoid": lambda v, out, g, a: (g * out * (1.0 - out),),
    "activation": _b_activation,
    "sum": lambda v, out, g, a: (np.full(v[0].shape, float(g)),),
    "squared_norm": lambda v, out, g, a: (2.0 * float(g) * v[0],),
    "log": lambda v, out, g, a: (g / v[0],),
    "power": _b_power,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate one primitive and record it on the graph of its inputs."""
    if kind not in _FORWARD:
        raise TapeError(f"unknown op kind {kind!r}")
    graph = next((t.graph for t in inputs if isinstance(t, Tensor)), None)
    if graph is None:
        raise TapeError(f"{kind}: at least one input must be a Tensor")
    tensors = [_lift(graph, t) for t in inputs]
    values = [graph.nodes[t.id].value for t in tensors]
    with np.errstate(over="ignore", invalid="ignore"):  # _record reports non-finite values
        value = _FORWARD[kind](values, attrs)
    requires_grad = any(graph.nodes[t.id].requires_grad for t in tensors)
    return graph._record(kind, [t.id for t in tensors], value, attrs, requires_grad)


def affine(W, x, b) -> Tensor:
    return forward_op("affine", (W, x, b))


def matvec(W, x) -> Tensor:
    return forward_op("matvec", (W, x))


def add(a, b) -> Tensor:
    return forward_op("add", (a, b))


def mul(a, b) -> Tensor:
    return forward_op("mul", (a, b))


def scale(x, factor: float) -> Tensor:
    return forward_op("scale", (x,), factor=float(factor))


def sigmoid(x) -> Tensor:
    return forward_op("sigmoid", (x,))


def activation(x, fn: str = "leaky_relu", slope: float = 0.01) -> Tensor:
    if fn not in ACTIVATIONS:
        raise TapeError(f"unknown activation {fn!r}")
    return forward_op("activation", (x,), fn=fn, slope=slope)


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def sum_(x) -> Tensor:
    return forward_op("sum", (x,))


def squared_norm(x) -> Tensor:
    return forward_op("squared_norm", (x,))


def log(x) -> Tensor:
    return forward_op("log", (x,))


def power(x, exponent) -> Tensor:
    return forward_op("power", (x,), exponent=exponent)


def backward(graph: Graph, output: Tensor, seed: float = 1.0,
             keep_intermediate: bool = False) -> dict[int, np.ndarray]:
    """Gradients of a scalar output with respect to every leaf requiring grad.

    With ``keep_intermediate`` the map also holds gradients of interior nodes.
    """
    out_node = graph.nodes[output.id]
    if out_node.value.shape != ():
        raise ShapeError("backward (output must be scalar)", out_node.value.shape)
    grads: dict[int, np.ndarray] = {output.id: np.asarray(float(seed))}
    for nid in range(output.id, -1, -1):
        g = grads.get(nid)
        node = graph.nodes[nid]
        if g is None or not node.requires_grad or node.kind == "leaf":
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(nid, node.kind, "backward")
        values = [graph.nodes[i].value for i in node.inputs]
        parts = _BACKWARD[node.kind](values, node.value, g, node.attrs)
        for i, part in zip(node.inputs, parts):
            if not graph.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + part
            else:
                grads[i] = part
        if not keep_intermediate and nid != output.id:
            del grads[nid]
    result = {}
    for nid, g in grads.items():
        node = graph.nodes[nid]
        if node.kind == "leaf" or keep_intermediate:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(nid, node.kind, "backward")
            result[nid] = np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return result


def check_gradients(scalar_fn, point, step: float = 1e-5, coords=None, n_coords: int = 20,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``scalar_fn(graph, *leaves)`` must build a scalar tensor.  ``point`` is one
    array or a sequence of arrays (one leaf each).  Coordinates index into the
    concatenation of the flattened arrays; when ``coords`` is None,
    ``n_coords`` of them are sampled (all of them if there are fewer).
    The error of a coordinate is ``|g - g_fd| / max(1, |g_fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]

    g = Graph()
    leaves = [g.leaf(a) for a in arrays]
    out = scalar_fn(g, *leaves)
    grads = backward(g, out)
    analytic = np.concatenate([grads.get(t.id, np.zeros(a.shape)).ravel() for t, a in zip(leaves, arrays)])

    sizes = [a.size for a in arrays]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    if coords is None:
        rng = rng or np.random.default_rng(0)
        coords = np.arange(total) if total <= n_coords else rng.choice(total, n_coords, replace=False)

    def value_at(flat_idx, delta):
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        shifted = [a.copy() for a in arrays]
        shifted[k].ravel()[flat_idx - offsets[k]] += delta
        gg = Graph()
        return scalar_fn(gg, *[gg.const(a) for a in shifted]).item()

    worst = 0.0
    for c in coords:
        fd = (value_at(c, step) - value_at(c, -step)) / (2.0 * step)
        worst = max(worst, abs(analytic[c] - fd) / max(1.0, abs(fd)))
    return worst
