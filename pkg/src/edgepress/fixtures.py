"""Seeded fixture graphs: chain, residual, concat and a toy YOLO-like net."""

from __future__ import annotations

import numpy as np

from edgepress.graph import (
    GRAPH_INPUT, GraphError, ModelGraph, Node, TensorSpec, infer_node, refresh_specs, validate,
)

FIXTURE_KINDS = ("toy_yolo", "chain", "residual", "concat")


class GraphBuilder:
    """Incrementally assembles a validated ModelGraph with seeded weights."""

    def __init__(self, name: str, input_shape: tuple[int, ...], seed: int):
        self.rng = np.random.default_rng(seed)
        self.name = name
        self.nodes: list[Node] = []
        self.constants: dict[str, np.ndarray] = {}
        self.shapes: dict[str, tuple[int, ...]] = {"input": tuple(input_shape)}
        self.input_shape = tuple(input_shape)
        self._count = 0

    def _id(self, stem: str) -> str:
        self._count += 1
        return f"n{self._count:03d}_{stem}"

    def _emit(self, op: str, inputs: list[str], n_out: int = 1, attrs=None, tags=(), stem=None) -> list[str]:
        nid = self._id(stem or op.lower())
        outs = [f"{nid}:{i}" for i in range(n_out)]
        node = Node(nid, op, list(inputs), outs, dict(attrs or {}), list(tags))
        for t, s in zip(outs, infer_node(node, [self.shapes[t] for t in inputs])):
            self.shapes[t] = s
        self.nodes.append(node)
        return outs

    def const(self, stem: str, arr: np.ndarray) -> str:
        tid = f"w{len(self.constants):03d}_{stem}"
        self.constants[tid] = arr.astype(np.float32)
        self.shapes[tid] = tuple(arr.shape)
        return tid

    def conv(self, x: str, out_ch: int, k: int = 3, stride: int = 1, act: str | None = "SiLU",
             bias: bool = True, tags=(), stem: str = "conv") -> str:
        in_ch = self.shapes[x][1]
        fan_in = in_ch * k * k
        w = self.rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out_ch, in_ch, k, k))
        inputs = [x, self.const(f"{stem}_kernel", w)]
        if bias:
            inputs.append(self.const(f"{stem}_bias", self.rng.normal(0.0, 0.1, size=(out_ch,))))
        (y,) = self._emit("Conv2d", inputs, attrs={"stride": stride, "padding": k // 2, "groups": 1},
                          tags=tags, stem=stem)
        if act:
            (y,) = self._emit(act, [y], stem=f"{stem}_{act.lower()}")
        return y

    def add(self, a: str, b: str) -> str:
        return self._emit("Add", [a, b])[0]

    def mul(self, a: str, b: str) -> str:
        return self._emit("Mul", [a, b])[0]

    def concat(self, xs: list[str]) -> str:
        return self._emit("Concat", xs, attrs={"axis": 1})[0]

    def split(self, x: str, sizes: list[int]) -> list[str]:
        return self._emit("Split", [x], n_out=len(sizes), attrs={"axis": 1, "split": list(sizes)})

    def maxpool(self, x: str, k: int, stride: int, padding: int = 0) -> str:
        return self._emit("MaxPool", [x], attrs={"kernel": k, "stride": stride, "padding": padding})[0]

    def upsample(self, x: str, scale: int = 2) -> str:
        return self._emit("Upsample", [x], attrs={"scale": scale})[0]

    def build(self, outputs: list[str]) -> ModelGraph:
        g = ModelGraph(
            nodes=self.nodes,
            tensors={"input": TensorSpec("input", "float32", self.input_shape, GRAPH_INPUT)},
            constants=self.constants,
            graph_inputs=["input"],
            graph_outputs=list(outputs),
            metadata={"name": self.name, "version": 1},
        )
        refresh_specs(g)
        report = validate(g)
        if not report.ok:
            raise GraphError(f"fixture {self.name} is invalid: {report.issues}")
        return g


def toy_yolo(seed: int = 0, resolution: int = 32) -> ModelGraph:
    """Stem convs, a C2f-like split/bottleneck/concat block, an SPPF-like
    pooling block, an upsample+concat neck and two heads tagged ``head``."""
    b = GraphBuilder("toy_yolo", (1, 3, resolution, resolution), seed)
    x = b.conv("input", 16, 3, 2, stem="stem0")
    x = b.conv(x, 32, 3, 2, stem="stem1")
    # C2f
    x = b.conv(x, 32, 1, stem="c2f_cv1")
    a, s = b.split(x, [16, 16])
    h = b.conv(s, 24, 3, stem="c2f_m_cv1")
    h = b.conv(h, 16, 3, stem="c2f_m_cv2")
    m = b.add(s, h)
    p3 = b.conv(b.concat([a, s, m]), 32, 1, stem="c2f_cv2")
    # SPPF
    x = b.conv(p3, 32, 3, 2, stem="down")
    x = b.conv(x, 16, 1, stem="sppf_cv1")
    y1 = b.maxpool(x, 5, 1, 2)
    y2 = b.maxpool(y1, 5, 1, 2)
    y3 = b.maxpool(y2, 5, 1, 2)
    p4 = b.conv(b.concat([x, y1, y2, y3]), 32, 1, stem="sppf_cv2")
    # neck
    n3 = b.conv(b.concat([b.upsample(p4), p3]), 32, 1, stem="neck_cv1")
    n3 = b.conv(n3, 32, 3, stem="neck_cv2")
    # heads
    h3 = b.conv(n3, 16, 3, stem="head3_cv")
    o3 = b.conv(h3, 6, 1, act="Sigmoid", tags=("head",), stem="head3_out")
    h4 = b.conv(p4, 16, 3, stem="head4_cv")
    o4 = b.conv(h4, 6, 1, act="Sigmoid", tags=("head",), stem="head4_out")
    return b.build([o3, o4])


def chain(seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    c0 = int(rng.integers(1, 5))
    b = GraphBuilder("chain", (1, c0, 8, 8), seed)
    x = "input"
    for i in range(int(rng.integers(2, 5))):
        x = b.conv(x, int(rng.integers(2, 9)), int(rng.choice([1, 3])), stem=f"conv{i}")
    x = b.conv(x, 3, 1, act=None, stem="out")
    return b.build([x])


def residual(seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    b = GraphBuilder("residual", (1, int(rng.integers(1, 5)), 8, 8), seed)
    width = int(rng.integers(2, 9))
    a = b.conv("input", width, 3, stem="conv_a")
    h = b.conv(a, int(rng.integers(2, 9)), 3, stem="conv_h")
    c = b.conv(h, width, int(rng.choice([1, 3])), stem="conv_b")
    x = b.add(a, c)
    x = b.conv(x, int(rng.integers(2, 9)), 3, stem="conv_c")
    x = b.conv(x, 3, 1, act=None, stem="out")
    return b.build([x])


def concat(seed: int = 0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    b = GraphBuilder("concat", (1, int(rng.integers(1, 5)), 8, 8), seed)
    a = b.conv("input", int(rng.integers(2, 9)), 3, stem="conv_a")
    c = b.conv("input", int(rng.integers(2, 9)), 1, stem="conv_b")
    x = b.concat([a, c])
    x = b.conv(x, int(rng.integers(2, 9)), 3, stem="conv_c")
    x = b.conv(x, 3, 1, act=None, stem="out")
    return b.build([x])


def gen_fixture(kind: str, seed: int = 0) -> ModelGraph:
    builders = {"toy_yolo": toy_yolo, "chain": chain, "residual": residual, "concat": concat}
    if kind not in builders:
        raise ValueError(f"unknown fixture kind {kind!r}; choose from {', '.join(FIXTURE_KINDS)}")
    return builders[kind](seed)


def random_inputs(g: ModelGraph, n: int, seed: int = 0) -> list[np.ndarray]:
    """``n`` seeded standard-normal inputs matching the graph's first input."""
    rng = np.random.default_rng(seed)
    shape = g.tensors[g.graph_inputs[0]].shape
    return [rng.standard_normal(shape).astype(np.float32) for _ in range(n)]
