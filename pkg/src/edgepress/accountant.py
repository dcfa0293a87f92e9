"""Parameter, MAC, flash and RAM accounting against a hardware profile."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from edgepress.container import serialize_model
from edgepress.graph import ModelGraph, infer_shapes

KB = 1024
MB = 1024 * 1024

# Bytes of one scale (float32) plus one zero point (int32) per quantization entry.
QPARAM_ENTRY_BYTES = 8


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    flash_budget: int
    ram_budget: int
    supply_voltage: float
    active_current: float
    sleep_current: float
    wake_period: float
    clock: float = 0.0

    def __post_init__(self):
        for f in ("flash_budget", "ram_budget", "supply_voltage", "active_current",
                  "sleep_current", "wake_period"):
            if not getattr(self, f) > 0:
                raise ValueError(f"hardware profile field {f} must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> HardwareProfile:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


PRESETS: dict[str, HardwareProfile] = {
    "stm32u575zi": HardwareProfile(
        name="stm32u575zi", flash_budget=2 * MB, ram_budget=768 * KB, supply_voltage=3.3,
        active_current=10.4e-3, sleep_current=1.1e-3, wake_period=30.0, clock=160e6,
    ),
    # Same power figures, memories scaled for the toy fixtures.
    "toy-mcu": HardwareProfile(
        name="toy-mcu", flash_budget=64 * KB, ram_budget=48 * KB, supply_voltage=3.3,
        active_current=10.4e-3, sleep_current=1.1e-3, wake_period=30.0, clock=160e6,
    ),
}

# Published baseline and compressed figures, kept for report comparison only.
# The parameter row is stored as 3.2e6; the source table prints "3200M".
REFERENCE_TABLE = {
    "baseline": {"flash_bytes": 9.95 * MB, "ram_bytes": 2.5 * MB, "params": 3.2e6, "gmacs": 0.50},
    "compressed": {"flash_bytes": 850.97 * KB, "ram_bytes": 677.30 * KB, "params": 960e3, "gmacs": 0.143},
}


def load_profile(spec: str | os.PathLike) -> HardwareProfile:
    """A preset name or a path to a JSON profile document."""
    if str(spec) in PRESETS:
        return PRESETS[str(spec)]
    return HardwareProfile.from_dict(json.loads(Path(spec).read_text()))


@dataclass
class ResourceFootprint:
    params: int
    macs: int
    weight_bytes: int
    flash_bytes: int
    ram_peak_bytes: int
    container_bytes: int = 0

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


def count_params(g: ModelGraph) -> int:
    """Elements of every weight payload. Scales and zero points live on
    Q/DQ nodes, not in constants, so they never count here."""
    return int(sum(int(a.size) for a in g.constants.values()))


def count_macs(g: ModelGraph) -> int:
    shapes = infer_shapes(g)
    total = 0
    for n in g.nodes:
        if n.op_kind == "Conv2d":
            _, o, ho, wo = shapes[n.outputs[0]]
            _, cg, kh, kw = shapes[n.inputs[1]]
            total += o * cg * kh * kw * ho * wo
        elif n.op_kind in ("Add", "Mul"):
            total += int(np.prod(shapes[n.outputs[0]], dtype=np.int64))
    return int(total)


def weight_bytes(g: ModelGraph) -> int:
    return int(sum(a.nbytes for a in g.constants.values()))


def qparam_bytes(g: ModelGraph) -> int:
    """Stored scales and zero points. A Q/DQ pair shares one set, so each
    DequantizeLinear counts once, plus any QuantizeLinear left unpaired."""
    consumers = g.consumers()
    total = 0
    for n in g.nodes:
        if n.qparams is None:
            continue
        if n.op_kind == "QuantizeLinear" and any(
                c.op_kind == "DequantizeLinear" for c in consumers.get(n.outputs[0], [])):
            continue
        total += QPARAM_ENTRY_BYTES * len(n.qparams.scale)
    return total


FRAMING_BYTES = 12  # magic, header length, CRC32


def flash_bytes(g: ModelGraph) -> int:
    """Deployed image estimate: weight blob at stored dtypes, binary-packed
    quantization params and container framing. The JSON header is a host
    side description and is excluded (see ``container_bytes``)."""
    return weight_bytes(g) + qparam_bytes(g) + FRAMING_BYTES


def container_bytes(g: ModelGraph) -> int:
    return len(serialize_model(g))


def _buffers(g: ModelGraph) -> tuple[dict[str, str | None], dict[str, int]]:
    """Map each tensor to the buffer it occupies at deployment.

    A Quantize/Dequantize chain is one integer buffer; a dequantized
    constant stays in flash (maps to None).
    """
    producers = g.producers()
    consumers = g.consumers()
    canon: dict[str, str | None] = {}

    def resolve(t: str) -> str | None:
        if t in canon:
            return canon[t]
        if t in g.constants:
            canon[t] = None
            return None
        p = producers.get(t)
        if p is not None and p.op_kind in ("QuantizeLinear", "DequantizeLinear"):
            canon[t] = resolve(p.inputs[0])
        else:
            canon[t] = t
        return canon[t]

    itemsize: dict[str, int] = {}
    for t, spec in g.tensors.items():
        b = resolve(t)
        if b is None:
            continue
        size = np.dtype(_np_dtype(g, t)).itemsize
        if any(c.op_kind == "QuantizeLinear" for c in consumers.get(t, [])) or spec.dtype != "float32":
            size = 1
        itemsize[b] = min(itemsize.get(b, size), size)
    return canon, itemsize


def ram_peak(g: ModelGraph) -> int:
    """Peak live activation bytes over the deterministic topological order.

    A buffer is live from production (graph inputs: from the start) until
    its last consumer runs; graph outputs stay live to the end. Constants
    reside in flash. Q/DQ nodes are bookkeeping, not compute: a quantized
    edge is a single int8 buffer.
    """
    shapes = infer_shapes(g)
    canon, itemsize = _buffers(g)
    order = [n for n in g.topological_order() if n.op_kind not in ("QuantizeLinear", "DequantizeLinear")]

    def nbytes(b: str) -> int:
        return int(np.prod(shapes[b], dtype=np.int64)) * itemsize[b]

    last_use: dict[str, int] = {}
    for i, n in enumerate(order):
        for t in n.inputs:
            if canon.get(t) is not None:
                last_use[canon[t]] = i
    end = len(order)
    for t in g.graph_outputs:
        if canon.get(t) is not None:
            last_use[canon[t]] = end
    live = {canon[t] for t in g.graph_inputs}
    peak = sum(nbytes(b) for b in live)
    for i, n in enumerate(order):
        live.update(canon[t] for t in n.outputs if canon.get(t) is not None)
        peak = max(peak, sum(nbytes(b) for b in live))
        live = {b for b in live if last_use.get(b, -1) > i}
    return int(peak)


def _np_dtype(g: ModelGraph, t: str) -> str:
    spec = g.tensors.get(t)
    return spec.dtype if spec is not None else "float32"


def footprint(g: ModelGraph, profile: HardwareProfile | None = None) -> ResourceFootprint:
    # profile is accepted for interface symmetry; budgets enter via fit_report
    return ResourceFootprint(
        params=count_params(g),
        macs=count_macs(g),
        weight_bytes=weight_bytes(g),
        flash_bytes=flash_bytes(g),
        ram_peak_bytes=ram_peak(g),
        container_bytes=container_bytes(g),
    )


@dataclass
class Verdict:
    resource: str
    used_bytes: float
    budget_bytes: float
    passed: bool
    headroom_pct: float


def fit_report(fp: ResourceFootprint | dict[str, float], profile: HardwareProfile) -> list[Verdict]:
    """Pass/fail per memory budget; headroom is ``(budget - used) / budget``."""
    if isinstance(fp, ResourceFootprint):
        flash, ram = fp.flash_bytes, fp.ram_peak_bytes
    else:
        flash, ram = fp["flash_bytes"], fp["ram_peak_bytes"]
    out = []
    for name, used, budget in (("flash", flash, profile.flash_budget), ("ram", ram, profile.ram_budget)):
        head = 100.0 * (budget - used) / budget
        out.append(Verdict(name, float(used), float(budget), used <= budget, head))
    return out


def table2_summary(baseline: ResourceFootprint, compressed: ResourceFootprint,
                   profile: HardwareProfile) -> list[list[str]]:
    """Rows shaped like the published compression table."""
    return [
        ["Metric", "Baseline", "Compressed", "HW constraints"],
        ["Model size (Flash)", f"{baseline.flash_bytes / KB:.2f} KB", f"{compressed.flash_bytes / KB:.2f} KB",
         f"{profile.flash_budget / KB:.0f} KB"],
        ["RAM usage (estimated)", f"{baseline.ram_peak_bytes / KB:.2f} KB",
         f"{compressed.ram_peak_bytes / KB:.2f} KB", f"{profile.ram_budget / KB:.0f} KB"],
        ["Parameters", f"{baseline.params}", f"{compressed.params}", "-"],
        ["GMACs", f"{baseline.macs / 1e9:.6f}", f"{compressed.macs / 1e9:.6f}", "-"],
    ]


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)))
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines)
