"""Reference interpreter for ModelGraph.

All arithmetic is float32 and every kernel has a fixed accumulation order,
so results are bit-reproducible. Convolution accumulates input channels
and taps one at a time: inserting an all-zero channel adds exact zeros
and leaves every output bit unchanged, which the pruning oracle relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from edgepress.graph import DTYPES, GraphError, ModelGraph, Node, TensorSpec, _pair
from edgepress.qparams import dequantize_array, dequantize_value, quantize_array, quantize_value

MODES = ("float", "qdq")

__all__ = [
    "ExecutionError", "ExecutionTrace", "TensorValue", "dequantize_value", "quantize_value", "run",
]


class ExecutionError(RuntimeError):
    pass


@dataclass
class TensorValue:
    spec: TensorSpec
    data: np.ndarray

    def __post_init__(self):
        if self.data.size != int(np.prod(self.spec.shape, dtype=np.int64)):
            raise ExecutionError(f"buffer of {self.data.size} elements does not match {list(self.spec.shape)}")

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass
class ExecutionTrace:
    values: dict[str, np.ndarray]
    mode: str

    def __getitem__(self, tid: str) -> np.ndarray:
        return self.values[tid]

    def outputs(self, g: ModelGraph) -> list[np.ndarray]:
        return [self.values[t] for t in g.graph_outputs]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride=1, padding=0, groups: int = 1) -> np.ndarray:
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=np.float32)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    out = np.zeros((n, o, ho, wo), dtype=np.float32)
    og = o // groups
    for gi in range(groups):
        osl = slice(gi * og, (gi + 1) * og)
        acc = out[:, osl]
        wg = w[osl]
        for ci in range(cg):
            plane = xp[:, gi * cg + ci]
            for i in range(kh):
                for j in range(kw):
                    tap = plane[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                    acc += wg[:, ci, i, j][None, :, None, None] * tap[:, None]
    if b is not None:
        out += b.astype(np.float32)[None, :, None, None]
    return out


def maxpool(x: np.ndarray, kernel=2, stride=None, padding=0) -> np.ndarray:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = np.full((n, c, h + 2 * ph, w + 2 * pw), -np.inf, dtype=np.float32)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    out = np.full((n, c, ho, wo), -np.inf, dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            np.maximum(out, xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw], out=out)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    one = np.float32(1.0)
    return (x / (one + np.exp(-x))).astype(np.float32)


def sigmoid(x: np.ndarray) -> np.ndarray:
    one = np.float32(1.0)
    return (one / (one + np.exp(-x))).astype(np.float32)


def _eval_node(node: Node, args: list[np.ndarray], mode: str) -> list[np.ndarray]:
    op, a = node.op_kind, node.attrs
    if op == "Conv2d":
        x, w = args[0], args[1].astype(np.float32)
        b = args[2] if len(args) > 2 else None
        return [conv2d(x, w, b, a.get("stride", 1), a.get("padding", 0), int(a.get("groups", 1)))]
    if op == "Add":
        return [np.add(args[0], args[1], dtype=np.float32)]
    if op == "Mul":
        return [np.multiply(args[0], args[1], dtype=np.float32)]
    if op == "Concat":
        return [np.concatenate(args, axis=int(a.get("axis", 1)))]
    if op == "Split":
        axis = int(a.get("axis", 1))
        cuts = np.cumsum([int(v) for v in a["split"]])[:-1]
        return [np.ascontiguousarray(p) for p in np.split(args[0], cuts, axis=axis)]
    if op == "MaxPool":
        return [maxpool(args[0], a.get("kernel", 2), a.get("stride"), a.get("padding", 0))]
    if op == "Upsample":
        f = int(a.get("scale", 2))
        return [args[0].repeat(f, axis=2).repeat(f, axis=3)]
    if op == "SiLU":
        return [silu(args[0])]
    if op == "Sigmoid":
        return [sigmoid(args[0])]
    if op == "Identity":
        return [args[0]]
    if op == "QuantizeLinear":
        if mode == "float":
            return [args[0]]
        return [quantize_array(args[0], node.qparams)]
    if op == "DequantizeLinear":
        x = args[0]
        if mode == "float" and x.dtype == np.float32:
            return [x]
        if node.qparams is None:
            raise ExecutionError(f"DequantizeLinear {node.id} has no QuantParams")
        return [dequantize_array(x, node.qparams)]
    raise ExecutionError(f"cannot execute op {op!r} at node {node.id}")


def run(g: ModelGraph, inputs: Sequence[np.ndarray | TensorValue] | Mapping[str, np.ndarray],
        mode: str = "float") -> ExecutionTrace:
    """Execute ``g`` in topological order.

    In ``"qdq"`` mode every QuantizeLinear/DequantizeLinear applies its
    affine map. In ``"float"`` mode activation Q/DQ pairs pass values
    through unchanged; integer constants are still dequantized, since
    that is the only way to read them.
    """
    if mode not in MODES:
        raise ExecutionError(f"unknown mode {mode!r}")
    if mode == "qdq":
        for n in g.nodes:
            if n.op_kind in ("QuantizeLinear", "DequantizeLinear") and n.qparams is None:
                raise ExecutionError(f"missing QuantParams at node {n.id}")
    if isinstance(inputs, Mapping):
        feeds = dict(inputs)
    else:
        if len(inputs) != len(g.graph_inputs):
            raise ExecutionError(f"expected {len(g.graph_inputs)} inputs, got {len(inputs)}")
        feeds = {t: (v.data if isinstance(v, TensorValue) else v) for t, v in zip(g.graph_inputs, inputs)}
    values: dict[str, np.ndarray] = {}
    for t in g.graph_inputs:
        spec = g.tensors[t]
        arr = np.asarray(feeds[t])
        if tuple(arr.shape) != tuple(spec.shape):
            if arr.size != int(np.prod(spec.shape, dtype=np.int64)):
                raise ExecutionError(f"input {t!r} has shape {list(arr.shape)}, expected {list(spec.shape)}")
            arr = arr.reshape(spec.shape)
        values[t] = arr.astype(DTYPES[spec.dtype], copy=False)
    values.update(g.constants)
    try:
        order = g.topological_order()
    except GraphError as e:
        raise ExecutionError(str(e))
    for node in order:
        outs = _eval_node(node, [values[t] for t in node.inputs], mode)
        for t, v in zip(node.outputs, outs):
            values[t] = v
    return ExecutionTrace(values=values, mode=mode)


def run_outputs(g: ModelGraph, x: np.ndarray, mode: str = "float") -> list[np.ndarray]:
    return run(g, [x], mode).outputs(g)
