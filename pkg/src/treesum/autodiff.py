"""Minimal reverse-mode differentiation over float64 numpy arrays.

A CompGraph records primitive operations (op kind, parent ids, static shape)
in topological order as expressions are built from Var handles. forward_eval
computes and caches every node value; backward_accumulate walks the tape in
reverse, applying one hand-registered vector-Jacobian rule per primitive and
accumulating parameter gradients in fixed node-id order so results are
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import linalg

LN_VARIANCE_EPS = 1e-5


class ShapeMismatch(ValueError):
    """Operand or binding shapes are inconsistent with declarations."""


class NoForwardPass(RuntimeError):
    """backward_accumulate called before any forward_eval."""


Array = np.ndarray


class Node:
    __slots__ = ("nid", "op", "parents", "shape", "value", "extra", "cache")

    def __init__(self, nid: int, op: str, parents: tuple[int, ...], shape: tuple[int, ...], extra=None):
        self.nid = nid
        self.op = op
        self.parents = parents
        self.shape = shape
        self.value: Array | None = None
        self.extra = extra
        self.cache = None


@dataclass(frozen=True)
class Var:
    """Handle to one node of a CompGraph."""

    graph: "CompGraph"
    nid: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.nodes[self.nid].shape

    def __add__(self, other):
        return self.graph.apply("add", self, _as_var(self.graph, other))

    def __radd__(self, other):
        return self.graph.apply("add", _as_var(self.graph, other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, _as_var(self.graph, other))

    def __rsub__(self, other):
        return self.graph.apply("sub", _as_var(self.graph, other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, _as_var(self.graph, other))

    def __rmul__(self, other):
        return self.graph.apply("mul", _as_var(self.graph, other), self)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, _as_var(self.graph, other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return self.graph.apply("slice", self, extra=key)

    @property
    def T(self) -> "Var":
        return self.graph.apply("transpose", self)


def _as_var(g: "CompGraph", x) -> Var:
    if isinstance(x, Var):
        if x.graph is not g:
            raise ValueError("mixing Vars from different graphs")
        return x
    return g.constant(np.asarray(x, dtype=np.float64))


def _asarray(x) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    return arr


# ---------------------------------------------------------------------------
# primitive registry: shape inference, forward, backward (VJP) per op kind
# ---------------------------------------------------------------------------


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce grad back to `shape` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(grad.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _bshape(sa, sb, op):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {sa} with {sb}") from exc


def _infer_shape(op: str, parents: list[Node], extra) -> tuple[int, ...]:
    shapes = [p.shape for p in parents]
    if op in ("add", "sub", "mul"):
        return _bshape(shapes[0], shapes[1], op)
    if op == "matmul":
        (a, b) = shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeMismatch(f"matmul: {a} @ {b}")
        return (a[0], b[1])
    if op in ("relu", "sigmoid", "tanh", "log", "softmax", "scale"):
        return shapes[0]
    if op == "layer_norm":
        x, gain, bias = shapes
        if len(x) < 1 or gain != (x[-1],) or bias != (x[-1],):
            raise ShapeMismatch(f"layer_norm: x {x}, gain {gain}, bias {bias}")
        return x
    if op == "inverse":
        (a,) = shapes
        if len(a) != 2 or a[0] != a[1]:
            raise ShapeMismatch(f"inverse: requires square 2-D, got {a}")
        return a
    if op == "logdet":
        (a,) = shapes
        if len(a) != 2 or a[0] != a[1]:
            raise ShapeMismatch(f"logdet: requires square 2-D, got {a}")
        return ()
    if op == "transpose":
        (a,) = shapes
        if len(a) != 2:
            raise ShapeMismatch(f"transpose: requires 2-D, got {a}")
        return (a[1], a[0])
    if op == "concat":
        axis = extra
        base = list(shapes[0])
        for s in shapes[1:]:
            if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis):
                raise ShapeMismatch(f"concat axis {axis}: {shapes}")
            base[axis] += s[axis]
        return tuple(base)
    if op == "slice":
        return np.zeros(shapes[0], dtype=bool)[extra].shape
    if op == "sum":
        axis, keepdims = extra
        return np.zeros(shapes[0], dtype=bool).sum(axis=axis, keepdims=keepdims).shape
    if op == "gather_rows":
        (t,) = shapes
        if len(t) != 2:
            raise ShapeMismatch(f"gather_rows: table must be 2-D, got {t}")
        return (len(extra), t[1])
    raise ValueError(f"unknown op {op!r}")


def _forward(node: Node, vals: list[Array]) -> Array:
    op = node.op
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "scale":
        return vals[0] * node.extra
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "sigmoid":
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-vals[0]))
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "log":
        with np.errstate(divide="ignore"):
            return np.log(vals[0])  # log(0) -> -inf surfaces as a non-finite loss
    if op == "softmax":
        x = vals[0]
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if op == "layer_norm":
        x, gain, bias = vals
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_VARIANCE_EPS)
        xhat = xc * inv
        node.cache = (xhat, inv)
        return xhat * gain + bias
    if op == "inverse":
        return linalg.inverse_array(vals[0])
    if op == "logdet":
        factors = linalg.lu_decompose(linalg.matrix(vals[0]))
        sign, logabs = linalg.slogdet(factors)
        if sign <= 0.0:
            raise ValueError("logdet requires a positive determinant")
        node.cache = linalg.inverse(factors).data  # reused in backward
        return np.float64(logabs)
    if op == "transpose":
        return vals[0].T.copy()
    if op == "concat":
        return np.concatenate(vals, axis=node.extra)
    if op == "slice":
        out = vals[0][node.extra]
        return np.array(out, dtype=np.float64) if np.ndim(out) == 0 else out.copy()
    if op == "sum":
        axis, keepdims = node.extra
        return vals[0].sum(axis=axis, keepdims=keepdims)
    if op == "gather_rows":
        return vals[0][node.extra]
    raise ValueError(f"unknown op {node.op!r}")


def _backward(node: Node, vals: list[Array], grad: Array) -> list[Array | None]:
    op = node.op
    y = node.value
    if op == "add":
        return [_unbroadcast(grad, vals[0].shape), _unbroadcast(grad, vals[1].shape)]
    if op == "sub":
        return [_unbroadcast(grad, vals[0].shape), _unbroadcast(-grad, vals[1].shape)]
    if op == "mul":
        return [
            _unbroadcast(grad * vals[1], vals[0].shape),
            _unbroadcast(grad * vals[0], vals[1].shape),
        ]
    if op == "matmul":
        return [grad @ vals[1].T, vals[0].T @ grad]
    if op == "scale":
        return [grad * node.extra]
    if op == "relu":
        return [grad * (vals[0] > 0.0)]  # subgradient at 0 is 0
    if op == "sigmoid":
        return [grad * y * (1.0 - y)]
    if op == "tanh":
        return [grad * (1.0 - y * y)]
    if op == "log":
        return [grad / vals[0]]
    if op == "softmax":
        inner = (grad * y).sum(axis=-1, keepdims=True)
        return [y * (grad - inner)]
    if op == "layer_norm":
        xhat, inv = node.cache
        gain = vals[1]
        dxhat = grad * gain
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(grad.ndim - 1))
        dgain = (grad * xhat).sum(axis=lead)
        dbias = grad.sum(axis=lead)
        return [dx, dgain, dbias]
    if op == "inverse":
        return [-(y.T @ grad @ y.T)]
    if op == "logdet":
        return [float(grad) * node.cache.T]
    if op == "transpose":
        return [grad.T.copy()]
    if op == "concat":
        axis = node.extra
        sizes = [v.shape[axis] for v in vals]
        splits = np.cumsum(sizes)[:-1]
        return list(np.split(grad, splits, axis=axis))
    if op == "slice":
        out = np.zeros_like(vals[0])
        out[node.extra] = grad
        return [out]
    if op == "sum":
        axis, keepdims = node.extra
        g = grad
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in sorted(ax % vals[0].ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return [np.broadcast_to(g, vals[0].shape).copy()]
    if op == "gather_rows":
        out = np.zeros_like(vals[0])
        np.add.at(out, node.extra, grad)
        return [out]
    raise ValueError(f"unknown op {node.op!r}")


_LEAF_OPS = ("input", "param", "const")


class CompGraph:
    """Recorded composition of primitives with named inputs, parameters, outputs."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self._forward_done = False

    # -- construction ------------------------------------------------------

    def _leaf(self, op: str, value: Array, shape=None) -> Var:
        node = Node(len(self.nodes), op, (), value.shape if shape is None else shape)
        node.value = value
        self.nodes.append(node)
        return Var(self, node.nid)

    def input(self, name: str, value) -> Var:
        if name in self.inputs:
            raise ValueError(f"duplicate input {name!r}")
        v = self._leaf("input", _asarray(value))
        self.inputs[name] = v.nid
        return v

    def parameter(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        v = self._leaf("param", _asarray(value))
        self.params[name] = v.nid
        return v

    def constant(self, value) -> Var:
        return self._leaf("const", _asarray(value))

    def apply(self, op: str, *parents: Var, extra=None) -> Var:
        pnodes = [self.nodes[p.nid] for p in parents]
        shape = _infer_shape(op, pnodes, extra)
        node = Node(len(self.nodes), op, tuple(p.nid for p in parents), shape, extra)
        self.nodes.append(node)
        self._forward_done = False
        return Var(self, node.nid)

    def set_output(self, name: str, var: Var) -> None:
        self.outputs[name] = var.nid

    def set_param(self, name: str, value) -> None:
        arr = _asarray(value)
        node = self.nodes[self.params[name]]
        if arr.shape != node.shape:
            raise ShapeMismatch(f"parameter {name!r}: bound {arr.shape}, declared {node.shape}")
        node.value = arr
        self._forward_done = False

    def param_value(self, name: str) -> Array:
        return self.nodes[self.params[name]].value

    def value(self, var: Var) -> Array:
        if not self._forward_done:
            raise NoForwardPass("forward_eval has not been run")
        return self.nodes[var.nid].value

    def _resolve_output(self, output: str | None) -> int:
        if output is None:
            if len(self.outputs) != 1:
                raise ValueError("output name required when the graph has != 1 outputs")
            return next(iter(self.outputs.values()))
        return self.outputs[output]


def forward_eval(g: CompGraph, inputs: dict[str, Array] | None = None) -> dict[str, Array]:
    """Bind inputs (by name) and compute every node in recorded order."""
    inputs = inputs or {}
    for name, value in inputs.items():
        if name not in g.inputs:
            raise KeyError(f"unknown input {name!r}")
        arr = _asarray(value)
        node = g.nodes[g.inputs[name]]
        if arr.shape != node.shape:
            raise ShapeMismatch(f"input {name!r}: bound {arr.shape}, declared {node.shape}")
        node.value = arr
    nodes = g.nodes
    for node in nodes:
        if node.op in _LEAF_OPS:
            continue
        node.value = _forward(node, [nodes[p].value for p in node.parents])
    g._forward_done = True
    return {name: nodes[nid].value for name, nid in g.outputs.items()}


def backward_accumulate(g: CompGraph, seed, output: str | None = None) -> dict[str, Array]:
    """Reverse sweep from `output` with cotangent `seed`; returns name -> gradient.

    Contributions to a node's gradient are summed in descending consumer node-id
    order, so the accumulation order (and the result bytes) are deterministic.
    """
    if not g._forward_done:
        raise NoForwardPass("run forward_eval before backward_accumulate")
    out_nid = g._resolve_output(output)
    out_node = g.nodes[out_nid]
    seed_arr = np.broadcast_to(_asarray(seed), out_node.shape).astype(np.float64)
    grads: list[Array | None] = [None] * len(g.nodes)
    grads[out_nid] = seed_arr.copy()
    nodes = g.nodes
    for node in reversed(nodes):
        gr = grads[node.nid]
        if gr is None or node.op in _LEAF_OPS:
            continue
        vals = [nodes[p].value for p in node.parents]
        contribs = _backward(node, vals, gr)
        for pid, contrib in zip(node.parents, contribs):
            if contrib is None:
                continue
            if grads[pid] is None:
                grads[pid] = contrib.astype(np.float64, copy=True)
            else:
                grads[pid] = grads[pid] + contrib
        grads[node.nid] = None  # free as we go
    store: dict[str, Array] = {}
    for name, nid in g.params.items():
        gr = grads[nid]
        store[name] = np.zeros(nodes[nid].shape) if gr is None else gr
        if not np.isfinite(store[name]).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    return store


def finite_diff_check(
    g: CompGraph,
    param: str,
    step: float = 1e-5,
    output: str | None = None,
) -> float:
    """Max relative error between central differences and the backward pass.

    The graph output must be scalar. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    out_nid = g._resolve_output(output)
    if g.nodes[out_nid].shape != ():
        raise ValueError("finite_diff_check requires a scalar output")
    out_name = next(name for name, nid in g.outputs.items() if nid == out_nid)
    forward_eval(g)
    analytic = backward_accumulate(g, 1.0, output=out_name)[param]
    node = g.nodes[g.params[param]]
    base = node.value  # restored by reference so callers keep array identity
    worst = 0.0
    try:
        work = base.copy()
        node.value = work
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            work[idx] = orig + step
            f_plus = float(forward_eval(g)[out_name])
            work[idx] = orig - step
            f_minus = float(forward_eval(g)[out_name])
            work[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    finally:
        node.value = base
        forward_eval(g)
    return worst


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def relu(v: Var) -> Var:
    return v.graph.apply("relu", v)


def sigmoid(v: Var) -> Var:
    return v.graph.apply("sigmoid", v)


def tanh(v: Var) -> Var:
    return v.graph.apply("tanh", v)


def log(v: Var) -> Var:
    return v.graph.apply("log", v)


def softmax(v: Var) -> Var:
    return v.graph.apply("softmax", v)


def layer_norm(x: Var, gain: Var, bias: Var) -> Var:
    return x.graph.apply("layer_norm", x, gain, bias)


def mat_inverse(v: Var) -> Var:
    return v.graph.apply("inverse", v)


def logdet(v: Var) -> Var:
    return v.graph.apply("logdet", v)


def scale(v: Var, c: float) -> Var:
    return v.graph.apply("scale", v, extra=float(c))


def concat(vs: Sequence[Var], axis: int) -> Var:
    if not vs:
        raise ValueError("concat of nothing")
    return vs[0].graph.apply("concat", *vs, extra=int(axis))


def reduce_sum(v: Var, axis=None, keepdims: bool = False) -> Var:
    return v.graph.apply("sum", v, extra=(axis, keepdims))


def transpose(v: Var) -> Var:
    return v.graph.apply("transpose", v)


def gather_rows(table: Var, indices) -> Var:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects 1-D indices")
    return table.graph.apply("gather_rows", table, extra=idx)


def affine(x: Var, w: Var, b: Var) -> Var:
    return x @ w + b
