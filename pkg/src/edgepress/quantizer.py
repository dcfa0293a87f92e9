"""Static post-training quantization: calibration, range estimation,
parameter derivation and QDQ rewriting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from edgepress.executor import run
from edgepress.graph import GraphError, ModelGraph, Node, refresh_specs, validate
from edgepress.qparams import QuantError, QuantParams, dequantize_array, params_from_ranges, quantize_array

QUANTIZABLE_OPS = ("Conv2d", "Mul", "Add")
DEFAULT_GRID = 100


@dataclass
class QuantConfig:
    activation_scheme: str = "asymmetric"
    weight_scheme: str = "symmetric"
    weight_granularity: str = "per-channel"
    group_size: int | None = None
    method: str = "min-max"
    op_subset: tuple[str, ...] = QUANTIZABLE_OPS
    grid_size: int = DEFAULT_GRID


@dataclass
class CalibrationStats:
    mins: dict[str, float]
    maxs: dict[str, float]
    count: int
    channel_mins: dict[str, np.ndarray] = field(default_factory=dict)
    channel_maxs: dict[str, np.ndarray] = field(default_factory=dict)
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def merge(self, other: CalibrationStats) -> CalibrationStats:
        """Associative, commutative combination of two partial stats."""
        keys = sorted(set(self.mins) | set(other.mins))
        inf = float("inf")
        out = CalibrationStats(
            mins={k: min(self.mins.get(k, inf), other.mins.get(k, inf)) for k in keys},
            maxs={k: max(self.maxs.get(k, -inf), other.maxs.get(k, -inf)) for k in keys},
            count=self.count + other.count,
        )
        for k in sorted(set(self.channel_mins) | set(other.channel_mins)):
            a, b = self.channel_mins.get(k), other.channel_mins.get(k)
            out.channel_mins[k] = b if a is None else a if b is None else np.minimum(a, b)
            a, b = self.channel_maxs.get(k), other.channel_maxs.get(k)
            out.channel_maxs[k] = b if a is None else a if b is None else np.maximum(a, b)
        for k in sorted(set(self.values) | set(other.values)):
            parts = [v.values[k] for v in (self, other) if k in v.values]
            out.values[k] = np.concatenate(parts)
        return out


def quantized_edges(g: ModelGraph, op_subset: Iterable[str] = QUANTIZABLE_OPS) -> list[str]:
    """Activation tensors entering or leaving an op of the subset, in graph order."""
    subset = set(op_subset)
    seen: dict[str, None] = {}
    for n in g.nodes:
        if n.op_kind not in subset:
            continue
        acts = [t for i, t in enumerate(n.inputs) if t not in g.constants and not _is_param_slot(n, i)]
        for t in acts + list(n.outputs):
            seen.setdefault(t, None)
    return list(seen)


def _is_param_slot(n: Node, i: int) -> bool:
    return n.op_kind == "Conv2d" and i >= 1


def calibrate(g: ModelGraph, samples: Sequence[np.ndarray], tensors: Sequence[str] | None = None,
              keep_values: bool = False, per_channel: bool = False) -> CalibrationStats:
    """Exact min/max of each activation tensor over all samples' float traces."""
    if len(samples) == 0:
        raise QuantError("calibration needs at least one sample")
    tensors = list(tensors) if tensors is not None else quantized_edges(g)
    inf = float("inf")
    stats = CalibrationStats(mins={t: inf for t in tensors}, maxs={t: -inf for t in tensors}, count=0)
    kept: dict[str, list[np.ndarray]] = {t: [] for t in tensors}
    for x in samples:
        trace = run(g, [x], "float")
        for t in tensors:
            v = trace[t]
            stats.mins[t] = min(stats.mins[t], float(v.min()))
            stats.maxs[t] = max(stats.maxs[t], float(v.max()))
            if per_channel and v.ndim == 4:
                cmin, cmax = v.min(axis=(0, 2, 3)), v.max(axis=(0, 2, 3))
                old = stats.channel_mins.get(t)
                stats.channel_mins[t] = cmin if old is None else np.minimum(old, cmin)
                old = stats.channel_maxs.get(t)
                stats.channel_maxs[t] = cmax if old is None else np.maximum(old, cmax)
            if keep_values:
                kept[t].append(v.astype(np.float32).ravel())
        stats.count += 1
    if keep_values:
        stats.values = {t: np.concatenate(kept[t]) for t in tensors}
    return stats


def quant_mse(values: np.ndarray, p: QuantParams) -> float:
    values = np.asarray(values, dtype=np.float32)
    err = values.astype(np.float64) - dequantize_array(quantize_array(values, p), p).astype(np.float64)
    return float(np.mean(err ** 2))


def mse_grid(lo: float, hi: float, grid_size: int = DEFAULT_GRID) -> list[tuple[float, float]]:
    """Candidate ranges: the min-max range, then ``grid_size`` symmetric
    shrinks of it with factors evenly spaced over [0.5, 1.0]."""
    cands = [(lo, hi)]
    for a in np.linspace(1.0, 0.5, grid_size):
        c = (float(a) * lo, float(a) * hi)
        if c not in cands:
            cands.append(c)
    return cands


def estimate_range(stats: CalibrationStats | np.ndarray, method: str = "min-max", target: str | None = None,
                   scheme: str = "asymmetric", grid_size: int = DEFAULT_GRID) -> tuple[float, float]:
    """Quantization range for one tensor: observed extremes, or the grid
    candidate with the lowest calibration MSE (ties keep the wider range)."""
    if isinstance(stats, CalibrationStats):
        lo, hi = stats.mins[target], stats.maxs[target]
        values = stats.values.get(target)
    else:
        values = np.asarray(stats, dtype=np.float32).ravel()
        lo, hi = float(values.min()), float(values.max())
    if method == "min-max":
        return lo, hi
    if method != "mse":
        raise QuantError(f"unknown range method {method!r}")
    if values is None:
        raise QuantError(f"mse range estimation needs calibration values for {target!r}")
    if lo == hi:
        return lo, hi
    best, best_err = (lo, hi), None
    for cand in mse_grid(lo, hi, grid_size):
        err = quant_mse(values, derive_params(cand, scheme))
        if best_err is None or err < best_err:
            best, best_err = cand, err
    return best


def derive_params(rng: tuple, scheme: str = "asymmetric", granularity: str = "per-tensor", b: int = 8,
                  axis: int | None = None, group_size: int | None = None) -> QuantParams:
    """QuantParams from a ``(lo, hi)`` range, or from ``(mins, maxs)``
    sequences for per-channel / per-group granularity."""
    lo, hi = rng
    if granularity == "per-tensor":
        return params_from_ranges([lo], [hi], scheme, bits=b)
    return params_from_ranges(list(np.ravel(lo)), list(np.ravel(hi)), scheme, granularity,
                              axis if axis is not None else 0, group_size, b)


def weight_ranges(w: np.ndarray, granularity: str, group_size: int | None = None):
    if granularity == "per-tensor":
        return float(w.min()), float(w.max())
    rows = w.reshape(w.shape[0], -1)
    if granularity == "per-channel":
        return rows.min(axis=1), rows.max(axis=1)
    ngroups = -(-rows.shape[1] // group_size)
    mins, maxs = [], []
    for r in rows:
        for j in range(ngroups):
            chunk = r[j * group_size:(j + 1) * group_size]
            mins.append(chunk.min())
            maxs.append(chunk.max())
    return np.array(mins), np.array(maxs)


def weight_params(w: np.ndarray, scheme: str = "symmetric", granularity: str = "per-channel",
                  group_size: int | None = None, method: str = "min-max",
                  grid_size: int = DEFAULT_GRID) -> QuantParams:
    """Weight QuantParams from min-max ranges, or from an MSE search.

    The MSE search runs per channel (or group) over that slice's shrink grid
    plus the tensor-level MSE range, so a finer granularity is never worse
    than per-tensor on the same weights.
    """
    if method == "min-max":
        rng = weight_ranges(w, granularity, group_size)
    elif method == "mse":
        tensor_rng = estimate_range(w, "mse", scheme=scheme, grid_size=grid_size)
        if granularity == "per-tensor":
            rng = tensor_rng
        else:
            rng = _slice_mse_ranges(w, scheme, granularity, group_size, grid_size, tensor_rng)
    else:
        raise QuantError(f"unknown range method {method!r}")
    return derive_params(rng, scheme, granularity, axis=0, group_size=group_size)


def _weight_slices(w: np.ndarray, granularity: str, group_size: int | None) -> list[np.ndarray]:
    rows = w.reshape(w.shape[0], -1)
    if granularity == "per-channel":
        return list(rows)
    return [r[j:j + group_size] for r in rows for j in range(0, rows.shape[1], group_size)]


def _slice_mse_ranges(w, scheme, granularity, group_size, grid_size, tensor_rng):
    mins, maxs = [], []
    for sl in _weight_slices(w, granularity, group_size):
        lo, hi = float(sl.min()), float(sl.max())
        cands = mse_grid(lo, hi, grid_size) if lo != hi else [(lo, hi)]
        cands.append(tensor_rng)
        errs = [quant_mse(sl, derive_params(c, scheme)) for c in cands]
        best = cands[int(np.argmin(errs))]  # first minimum: own range wins ties
        mins.append(best[0])
        maxs.append(best[1])
    return np.array(mins), np.array(maxs)


def build_params(g: ModelGraph, stats: CalibrationStats, cfg: QuantConfig | None = None) -> dict[str, QuantParams]:
    """QuantParams for every activation edge and weight of the op subset."""
    cfg = cfg or QuantConfig()
    params: dict[str, QuantParams] = {}
    for t in quantized_edges(g, cfg.op_subset):
        lo, hi = estimate_range(stats, cfg.method, t, cfg.activation_scheme, cfg.grid_size)
        params[t] = derive_params((lo, hi), cfg.activation_scheme)
    for n in g.nodes:
        if n.op_kind not in cfg.op_subset:
            continue
        for t in _weight_inputs(g, n):
            w = g.constants[t]
            gran = cfg.weight_granularity if n.op_kind == "Conv2d" else "per-tensor"
            params[t] = weight_params(w, cfg.weight_scheme, gran, cfg.group_size, cfg.method, cfg.grid_size)
    return params


def _weight_inputs(g: ModelGraph, n: Node) -> list[str]:
    if n.op_kind == "Conv2d":
        return [n.inputs[1]] if n.inputs[1] in g.constants else []
    return [t for t in n.inputs if t in g.constants]


def rewrite_qdq(g: ModelGraph, params: dict[str, QuantParams],
                op_subset: Iterable[str] = QUANTIZABLE_OPS) -> ModelGraph:
    """Bracket every activation edge of the op subset with a
    QuantizeLinear/DequantizeLinear pair and store weights as integer codes
    feeding a DequantizeLinear. Biases stay float32. Edges that already
    carry a pair are left alone, so rewriting twice is a no-op.
    """
    subset = tuple(op_subset)
    bad = [op for op in subset if op not in QUANTIZABLE_OPS]
    if bad:
        raise QuantError(f"cannot quantize unsupported op {bad[0]!r}")
    if not subset:
        return g.copy()
    out = g.copy()
    producers = out.producers()
    consumers = out.consumers()
    new_nodes: list[Node] = []

    for t in quantized_edges(g, subset):
        p = producers.get(t)
        if p is not None and p.op_kind == "DequantizeLinear":
            continue
        if any(c.op_kind == "QuantizeLinear" for c in consumers.get(t, [])):
            continue
        if t not in params:
            raise QuantError(f"missing QuantParams for tensor {t!r}")
        qp = params[t]
        if p is None:  # graph input: new tensors downstream
            q_t, dq_t = f"{t}::q", f"{t}::dq"
            for c in consumers.get(t, []):
                c.inputs = [dq_t if i == t else i for i in c.inputs]
            new_nodes += [Node(f"q({t})", "QuantizeLinear", [t], [q_t], qparams=qp),
                          Node(f"dq({t})", "DequantizeLinear", [q_t], [dq_t], qparams=qp)]
        else:  # produced tensor: the DQ output keeps the original id
            f_t, q_t = f"{t}::f", f"{t}::q"
            p.outputs = [f_t if o == t else o for o in p.outputs]
            new_nodes += [Node(f"q({t})", "QuantizeLinear", [f_t], [q_t], qparams=qp),
                          Node(f"dq({t})", "DequantizeLinear", [q_t], [t], qparams=qp)]

    for n in g.nodes:
        if n.op_kind not in subset:
            continue
        for t in _weight_inputs(g, n):
            if t not in out.constants:
                continue  # shared weight already rewritten
            if t not in params:
                raise QuantError(f"missing QuantParams for weight {t!r}")
            qp = params[t]
            codes = quantize_array(out.constants.pop(t), qp)
            out.constants[f"{t}::int"] = codes
            new_nodes.append(Node(f"dq({t})", "DequantizeLinear", [f"{t}::int"], [t], qparams=qp))

    out.nodes.extend(new_nodes)
    try:
        refresh_specs(out)
    except (GraphError, QuantError) as e:
        raise QuantError(f"QDQ rewrite produced an inconsistent graph: {e}")
    report = validate(out)
    if not report.ok:
        raise QuantError(f"QDQ rewrite produced an invalid graph: {report.issues[0]}")
    return out


def qdq_pairs(g: ModelGraph) -> int:
    """DequantizeLinear nodes fed by a QuantizeLinear or by integer weight codes."""
    producers = g.producers()
    n = 0
    for node in g.nodes:
        if node.op_kind != "DequantizeLinear":
            continue
        src = node.inputs[0]
        p = producers.get(src)
        if (p is not None and p.op_kind == "QuantizeLinear") or (
                src in g.constants and g.constants[src].dtype != np.float32):
            n += 1
    return n


def measure_quant_error(g_float: ModelGraph, g_qdq: ModelGraph, samples: Sequence[np.ndarray]) -> dict:
    """Per-tensor MSE / max-abs over tensors both graphs share, and output deltas."""
    if [g_float.tensors[t].shape for t in g_float.graph_inputs] != \
            [g_qdq.tensors[t].shape for t in g_qdq.graph_inputs] or \
            [g_float.tensors[t].shape for t in g_float.graph_outputs] != \
            [g_qdq.tensors[t].shape for t in g_qdq.graph_outputs]:
        raise QuantError("graphs do not share input/output specs")
    shared = [t for t in g_float.tensors
              if t in g_qdq.tensors and g_float.tensors[t].dtype == "float32"
              and g_qdq.tensors[t].dtype == "float32" and g_float.tensors[t].shape == g_qdq.tensors[t].shape]
    sq = {t: 0.0 for t in shared}
    mx = {t: 0.0 for t in shared}
    cnt = {t: 0 for t in shared}
    out_abs = {t: 0.0 for t in g_float.graph_outputs}
    out_max = {t: 0.0 for t in g_float.graph_outputs}
    out_n = {t: 0 for t in g_float.graph_outputs}
    for x in samples:
        a = run(g_float, [x], "float")
        b = run(g_qdq, [x], "qdq")
        for t in shared:
            d = a[t].astype(np.float64) - b[t].astype(np.float64)
            sq[t] += float(np.sum(d ** 2))
            mx[t] = max(mx[t], float(np.max(np.abs(d))) if d.size else 0.0)
            cnt[t] += d.size
        for t, u in zip(g_float.graph_outputs, g_qdq.graph_outputs):
            d = np.abs(a[t].astype(np.float64) - b[u].astype(np.float64))
            out_abs[t] += float(d.sum())
            out_max[t] = max(out_max[t], float(d.max()))
            out_n[t] += d.size
    return {
        "samples": len(samples),
        "tensors": {t: {"mse": sq[t] / cnt[t] if cnt[t] else 0.0, "max_abs": mx[t]} for t in shared},
        "outputs": {t: {"mean_abs": out_abs[t] / out_n[t] if out_n[t] else 0.0, "max_abs": out_max[t]}
                    for t in g_float.graph_outputs},
    }
