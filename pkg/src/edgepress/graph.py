"""Compute-graph IR: tensors, nodes, shape inference and validation."""

from __future__ import annotations

import copy
import heapq
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from edgepress.qparams import QuantError, QuantParams

OP_KINDS = frozenset({
    "Conv2d", "Add", "Mul", "Concat", "Split", "MaxPool", "Upsample",
    "SiLU", "Sigmoid", "QuantizeLinear", "DequantizeLinear", "Identity",
})
DTYPES = {"float32": np.float32, "int8": np.int8, "uint8": np.uint8, "int32": np.int32}
GRAPH_INPUT = "graph-input"
CONSTANT = "constant"


class GraphError(ValueError):
    """Raised when a graph violates an IR invariant."""

    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message)
        self.node_id = node_id


@dataclass
class TensorSpec:
    id: str
    dtype: str
    shape: tuple[int, ...]
    producer: str  # node id, GRAPH_INPUT or CONSTANT

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * np.dtype(DTYPES[self.dtype]).itemsize


@dataclass
class Node:
    id: str
    op_kind: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)
    tags: list[str] = field(default_factory=list)
    qparams: QuantParams | None = None


@dataclass
class ModelGraph:
    """A DAG of nodes over named tensors.

    Weights live in ``constants`` (tensor id -> array) and are wired into
    nodes as ordinary inputs; Conv2d takes ``[x, kernel]`` or
    ``[x, kernel, bias]``.
    """

    nodes: list[Node]
    tensors: dict[str, TensorSpec]
    constants: dict[str, np.ndarray]
    graph_inputs: list[str]
    graph_outputs: list[str]
    metadata: dict[str, Any] = field(default_factory=lambda: {"name": "model", "version": 1})

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producers(self) -> dict[str, Node]:
        return {t: n for n in self.nodes for t in n.outputs}

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def copy(self) -> ModelGraph:
        return copy.deepcopy(self)

    def topological_order(self) -> list[Node]:
        """Kahn's algorithm, lexicographically smallest ready node id first."""
        order = topological_order(self)
        if order is None:
            raise GraphError("no topological order")
        return order


@dataclass
class ValidationReport:
    issues: list[str]
    shapes: dict[str, tuple[int, ...]]

    @property
    def ok(self) -> bool:
        return not self.issues


def topological_order(g: ModelGraph) -> list[Node] | None:
    producers = g.producers()
    by_id = {n.id: n for n in g.nodes}
    deps: dict[str, set[str]] = {}
    users: dict[str, set[str]] = {n.id: set() for n in g.nodes}
    for n in g.nodes:
        deps[n.id] = {producers[t].id for t in n.inputs if t in producers}
        for d in deps[n.id]:
            users[d].add(n.id)
    remaining = {k: len(v) for k, v in deps.items()}
    ready = [k for k, v in remaining.items() if v == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(by_id[nid])
        for u in users[nid]:
            remaining[u] -= 1
            if remaining[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(g.nodes):
        return None
    return order


def _pair(v: Any) -> tuple[int, int]:
    if isinstance(v, (list, tuple)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _broadcast(a: tuple[int, ...], b: tuple[int, ...], nid: str) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise GraphError(f"operand shapes {list(a)} and {list(b)} do not broadcast at node {nid}", nid)


def infer_node(node: Node, in_shapes: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    """Output shapes of one node given its input shapes."""
    nid, op, a = node.id, node.op_kind, node.attrs
    if op not in OP_KINDS:
        raise GraphError(f"unknown op_kind {op!r} at node {nid}", nid)
    if op == "Conv2d":
        if len(in_shapes) not in (2, 3):
            raise GraphError(f"Conv2d expects 2 or 3 inputs at node {nid}", nid)
        x, w = in_shapes[0], in_shapes[1]
        if len(w) != 4:
            raise GraphError(f"bad kernel rank at node {nid}", nid)
        if len(x) != 4:
            raise GraphError(f"bad input rank at node {nid}", nid)
        groups = int(a.get("groups", 1))
        if x[1] % groups or w[0] % groups or w[1] * groups != x[1]:
            raise GraphError(
                f"kernel in-channels {w[1]} x groups {groups} != input channels {x[1]} at node {nid}", nid)
        if len(in_shapes) == 3 and tuple(in_shapes[2]) != (w[0],):
            raise GraphError(f"bias shape {list(in_shapes[2])} != [{w[0]}] at node {nid}", nid)
        sh, sw = _pair(a.get("stride", 1))
        ph, pw = _pair(a.get("padding", 0))
        ho, wo = conv_out_extent(x[2], w[2], sh, ph), conv_out_extent(x[3], w[3], sw, pw)
        if ho < 1 or wo < 1:
            raise GraphError(f"empty conv output at node {nid}", nid)
        return [(x[0], w[0], ho, wo)]
    if op in ("Add", "Mul"):
        if len(in_shapes) != 2:
            raise GraphError(f"{op} expects 2 inputs at node {nid}", nid)
        return [_broadcast(in_shapes[0], in_shapes[1], nid)]
    if op == "Concat":
        axis = int(a.get("axis", 1))
        if not in_shapes:
            raise GraphError(f"Concat without inputs at node {nid}", nid)
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if len(s) != len(first):
                raise GraphError(f"rank mismatch at node {nid}", nid)
            for d in range(len(first)):
                if d != axis and s[d] != first[d]:
                    kind = "spatial mismatch" if d >= 2 else "shape mismatch"
                    raise GraphError(f"{kind} at node {nid}", nid)
        out = list(first)
        out[axis] = sum(s[axis] for s in in_shapes)
        return [tuple(out)]
    if op == "Split":
        axis = int(a.get("axis", 1))
        sizes = [int(v) for v in a["split"]]
        x = in_shapes[0]
        if sum(sizes) != x[axis] or any(v < 1 for v in sizes):
            raise GraphError(f"split sizes {sizes} do not sum to extent {x[axis]} at node {nid}", nid)
        if len(sizes) != len(node.outputs):
            raise GraphError(f"split has {len(sizes)} sizes but {len(node.outputs)} outputs at node {nid}", nid)
        outs = []
        for v in sizes:
            s = list(x)
            s[axis] = v
            outs.append(tuple(s))
        return outs
    if op == "MaxPool":
        x = in_shapes[0]
        kh, kw = _pair(a.get("kernel", 2))
        sh, sw = _pair(a.get("stride", a.get("kernel", 2)))
        ph, pw = _pair(a.get("padding", 0))
        ho, wo = conv_out_extent(x[2], kh, sh, ph), conv_out_extent(x[3], kw, sw, pw)
        if ho < 1 or wo < 1:
            raise GraphError(f"empty pool output at node {nid}", nid)
        return [(x[0], x[1], ho, wo)]
    if op == "Upsample":
        x = in_shapes[0]
        f = int(a.get("scale", 2))
        return [(x[0], x[1], x[2] * f, x[3] * f)]
    # SiLU, Sigmoid, Identity, QuantizeLinear, DequantizeLinear
    if len(in_shapes) != 1:
        raise GraphError(f"{op} expects 1 input at node {nid}", nid)
    if op in ("QuantizeLinear", "DequantizeLinear") and node.qparams is not None:
        try:
            node.qparams.check_shape(in_shapes[0], nid)
        except QuantError as e:
            raise GraphError(str(e), nid)
    return [tuple(in_shapes[0])]


def infer_dtype(node: Node, in_dtypes: list[str]) -> str:
    if node.op_kind == "QuantizeLinear":
        return node.qparams.storage_dtype if node.qparams is not None else "uint8"
    if node.op_kind == "DequantizeLinear":
        return "float32"
    return in_dtypes[0] if in_dtypes else "float32"


def _infer(g: ModelGraph, issues: list[str] | None) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for t in g.graph_inputs:
        if t in g.tensors:
            shapes[t] = tuple(g.tensors[t].shape)
    for t, arr in g.constants.items():
        shapes[t] = tuple(arr.shape)
    order = topological_order(g)
    if order is None:
        if issues is None:
            raise GraphError("no topological order")
        issues.append("no topological order")
        return shapes
    for node in order:
        missing = [t for t in node.inputs if t not in shapes]
        if missing:
            msg = f"undefined input tensor {missing[0]!r} at node {node.id}"
            if issues is None:
                raise GraphError(msg, node.id)
            issues.append(msg)
            continue
        try:
            outs = infer_node(node, [shapes[t] for t in node.inputs])
        except GraphError as e:
            if issues is None:
                raise
            issues.append(str(e))
            continue
        if len(outs) != len(node.outputs):
            msg = f"node {node.id} declares {len(node.outputs)} outputs, op yields {len(outs)}"
            if issues is None:
                raise GraphError(msg, node.id)
            issues.append(msg)
            continue
        for t, s in zip(node.outputs, outs):
            shapes[t] = s
    return shapes


def infer_shapes(g: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Concrete shape of every tensor. Raises GraphError on inconsistency."""
    return _infer(g, None)


def refresh_specs(g: ModelGraph) -> ModelGraph:
    """Rebuild ``g.tensors`` from inferred shapes and dtypes (in place)."""
    shapes = infer_shapes(g)
    dtypes: dict[str, str] = {}
    specs: dict[str, TensorSpec] = {}
    for t in g.graph_inputs:
        old = g.tensors[t]
        dtypes[t] = old.dtype
        specs[t] = TensorSpec(t, old.dtype, shapes[t], GRAPH_INPUT)
    for t, arr in g.constants.items():
        dt = _dtype_name(arr.dtype)
        dtypes[t] = dt
        specs[t] = TensorSpec(t, dt, shapes[t], CONSTANT)
    for node in g.topological_order():
        dt = infer_dtype(node, [dtypes[t] for t in node.inputs])
        for t in node.outputs:
            dtypes[t] = dt
            specs[t] = TensorSpec(t, dt, shapes[t], node.id)
    g.tensors = specs
    return g


def _dtype_name(dt: np.dtype) -> str:
    for name, t in DTYPES.items():
        if np.dtype(t) == dt:
            return name
    raise GraphError(f"unsupported dtype {dt}")


def validate(g: ModelGraph) -> ValidationReport:
    """Check every invariant and report issues; never raises."""
    issues: list[str] = []
    seen_nodes: set[str] = set()
    produced: dict[str, str] = {}
    for t in g.graph_inputs:
        produced[t] = GRAPH_INPUT
        if t not in g.tensors:
            issues.append(f"graph input {t!r} has no tensor spec")
    for t in g.constants:
        if t in produced:
            issues.append(f"tensor {t!r} has more than one producer")
        produced[t] = CONSTANT
    for n in g.nodes:
        if n.id in seen_nodes:
            issues.append(f"duplicate node id {n.id}")
        seen_nodes.add(n.id)
        if n.op_kind not in OP_KINDS:
            issues.append(f"unknown op_kind {n.op_kind!r} at node {n.id}")
        for t in n.outputs:
            if t in produced:
                issues.append(f"tensor {t!r} has more than one producer")
            produced[t] = n.id
    for n in g.nodes:
        for t in n.inputs:
            if t not in produced:
                issues.append(f"dangling tensor {t!r} consumed by node {n.id}")
    for t in g.graph_outputs:
        if t not in produced:
            issues.append(f"graph output {t!r} is never produced")
    for t, spec in g.tensors.items():
        if any(int(d) < 1 for d in spec.shape):
            issues.append(f"tensor {t!r} has non-positive extent {list(spec.shape)}")
        if spec.dtype not in DTYPES:
            issues.append(f"tensor {t!r} has unsupported dtype {spec.dtype!r}")
    shapes: dict[str, tuple[int, ...]] = {}
    if not issues:
        shapes = _infer(g, issues)
        for t, spec in g.tensors.items():
            if t in shapes and tuple(spec.shape) != tuple(shapes[t]):
                issues.append(f"tensor {t!r} declared {list(spec.shape)} but inferred {list(shapes[t])}")
    return ValidationReport(issues=issues, shapes=shapes)


def conv_parts(g: ModelGraph, node: Node) -> tuple[np.ndarray, np.ndarray | None]:
    """Kernel and optional bias constants of a Conv2d node."""
    w = g.constants[node.inputs[1]]
    b = g.constants[node.inputs[2]] if len(node.inputs) > 2 else None
    return w, b
