"""Config-driven compression pipeline and parameter sweeps."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from edgepress import accountant, powersim
from edgepress.container import atomic_write, load_model, load_tensor, save_model, save_tensor
from edgepress.executor import run
from edgepress.fixtures import gen_fixture, random_inputs
from edgepress.graph import ModelGraph, validate
from edgepress.pruner import Exclusions, PruningSchedule, run_schedule
from edgepress.quantizer import QuantConfig, build_params, calibrate, measure_quant_error, rewrite_qdq

log = logging.getLogger("edgepress")

SCHEMA_VERSION = 1
STAGE_CODES = {"config": 2, "validate": 10, "prune": 11, "calibrate": 12, "quantize": 13,
               "account": 14, "power": 15}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = STAGE_CODES[stage]


@dataclass
class PruningConfig:
    enabled: bool = True
    r_target: float = 0.7
    k: int = 6
    scope: str = "local"
    normalization: str = "mean"
    target: str = "params"
    exclude_nodes: list[str] = field(default_factory=list)
    exclude_tags: list[str] = field(default_factory=lambda: ["head"])
    exclude_concat: bool = True
    stop_threshold: float = 0.20
    metric: str = "none"  # "none" | "cosine"
    eval_samples: int = 8


@dataclass
class QuantizationConfig:
    enabled: bool = True
    activation_scheme: str = "asymmetric"
    weight_scheme: str = "symmetric"
    weight_granularity: str = "per-channel"
    group_size: int | None = None
    method: str = "min-max"
    op_subset: list[str] = field(default_factory=lambda: ["Conv2d", "Mul", "Add"])
    grid_size: int = 100
    calibration_dir: str | None = None
    sample_count: int = 300
    error_samples: int = 8


@dataclass
class PowerConfig:
    latency_s: float = 1.510
    trace_duration_s: float = 120.0


@dataclass
class PipelineConfig:
    model: str
    output_dir: str = "out"
    seed: int = 0
    pruning: PruningConfig = field(default_factory=PruningConfig)
    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)
    hardware_profile: str = "stm32u575zi"
    battery: Any = field(default_factory=lambda: {"amp_hours": 7.0, "nominal_voltage": 3.7})
    power: PowerConfig = field(default_factory=PowerConfig)
    report_formats: list[str] = field(default_factory=lambda: ["json", "table"])
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _section(cls, data: dict | None, name: str):
    data = dict(data or {})
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    return cls(**data)


def parse_config(doc: dict[str, Any], base_dir: str | os.PathLike | None = None) -> PipelineConfig:
    """Build and check a PipelineConfig from a JSON document.

    Relative paths resolve against ``base_dir`` (the config file's folder).
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    if "model" not in doc:
        raise ConfigError("config needs a 'model' entry")
    sections = {
        "pruning": _section(PruningConfig, doc.pop("pruning", None), "pruning"),
        "quantization": _section(QuantizationConfig, doc.pop("quantization", None), "quantization"),
        "power": _section(PowerConfig, doc.pop("power", None), "power"),
    }
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    cfg = PipelineConfig(**doc, **sections)
    p = cfg.pruning
    if not 0.0 < p.r_target < 1.0:
        raise ConfigError(f"pruning.r_target must lie in (0, 1), got {p.r_target}")
    if int(p.k) < 1:
        raise ConfigError(f"pruning.k must be >= 1, got {p.k}")
    if not 0.0 <= p.stop_threshold < 1.0:
        raise ConfigError("pruning.stop_threshold must lie in [0, 1)")
    if p.metric not in ("none", "cosine"):
        raise ConfigError(f"unknown pruning.metric {p.metric!r}")
    q = cfg.quantization
    if q.sample_count < 1:
        raise ConfigError("quantization.sample_count must be >= 1")
    if q.method not in ("min-max", "mse"):
        raise ConfigError(f"unknown quantization.method {q.method!r}")
    bad = [f for f in cfg.report_formats if f not in ("json", "table")]
    if bad:
        raise ConfigError(f"unknown report format {bad[0]!r}")
    if base_dir is not None:
        base = Path(base_dir)

        def resolve(v: str | None) -> str | None:
            if v is None or v.startswith("fixture:") or v in accountant.PRESETS or Path(v).is_absolute():
                return v
            return str(base / v)

        cfg.model = resolve(cfg.model)
        cfg.output_dir = resolve(cfg.output_dir)
        cfg.hardware_profile = resolve(cfg.hardware_profile)
        q.calibration_dir = resolve(q.calibration_dir)
        if isinstance(cfg.battery, str):
            cfg.battery = resolve(cfg.battery)
    return cfg


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_config(doc, path.parent)


def dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def write_json(path: Path, obj: Any) -> None:
    atomic_write(path, dump_json(obj))


def load_graph(spec: str, seed: int = 0) -> ModelGraph:
    """A model path, or ``fixture:<kind>`` for a generated fixture."""
    if spec.startswith("fixture:"):
        return gen_fixture(spec.split(":", 1)[1], seed)
    return load_model(spec)


def cosine_metric(reference: ModelGraph, samples: list[np.ndarray]) -> Callable[[ModelGraph], float]:
    """Mean cosine similarity of mean-centred outputs against ``reference``.

    Centring matters: sigmoid heads sit near 0.5, which makes the plain
    cosine close to 1 for almost any model.
    """
    ref = [np.concatenate([o.ravel() for o in run(reference, [x]).outputs(reference)]) for x in samples]

    def metric(g: ModelGraph) -> float:
        sims = []
        for x, r in zip(samples, ref):
            y = np.concatenate([o.ravel() for o in run(g, [x]).outputs(g)]).astype(np.float64)
            y -= y.mean()
            r64 = r.astype(np.float64) - r.mean()
            den = np.linalg.norm(y) * np.linalg.norm(r64)
            sims.append(float(y @ r64 / den) if den > 0 else 0.0)
        return float(np.mean(sims))

    return metric


def make_schedule(p: PruningConfig) -> PruningSchedule:
    return PruningSchedule(
        r_target=p.r_target, k=int(p.k), scope=p.scope, normalization=p.normalization,
        exclusions=Exclusions(tuple(p.exclude_nodes), tuple(p.exclude_tags), p.exclude_concat),
        stop_threshold=p.stop_threshold, target=p.target,
    )


def prune_stage(g: ModelGraph, cfg: PipelineConfig):
    p = cfg.pruning
    eval_fn = None
    if p.metric == "cosine":
        eval_fn = cosine_metric(g, random_inputs(g, p.eval_samples, cfg.seed + 1))
    return run_schedule(g, make_schedule(p), eval_fn)


def select_calibration(cfg: PipelineConfig) -> list[np.ndarray]:
    q = cfg.quantization
    if not q.calibration_dir or not Path(q.calibration_dir).is_dir():
        raise StageError("calibrate", f"calibration directory not found: {q.calibration_dir}")
    files = sorted(Path(q.calibration_dir).glob("*.ept"))
    if not files:
        raise StageError("calibrate", f"no .ept tensors in {q.calibration_dir}")
    if len(files) > q.sample_count:
        rng = np.random.default_rng(cfg.seed)
        idx = sorted(rng.choice(len(files), q.sample_count, replace=False).tolist())
        files = [files[i] for i in idx]
    return [load_tensor(f) for f in files]


def write_calibration_set(g: ModelGraph, directory: str | os.PathLike, count: int, seed: int = 0) -> list[Path]:
    directory = Path(directory)
    paths = []
    for i, x in enumerate(random_inputs(g, count, seed)):
        p = directory / f"sample_{i:04d}.ept"
        save_tensor(x, p)
        paths.append(p)
    return paths


def fit_dicts(verdicts: list[accountant.Verdict]) -> list[dict]:
    return [asdict(v) for v in verdicts]


def run_pipeline(cfg: PipelineConfig) -> dict[str, Any]:
    """validate -> prune -> calibrate -> quantize -> account -> power.

    Writes every artifact under ``cfg.output_dir`` and returns the
    compression report. Stage failures raise StageError.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    try:
        g = load_graph(cfg.model, cfg.seed)
    except (OSError, ValueError) as e:
        raise StageError("validate", str(e))
    report = validate(g)
    if not report.ok:
        raise StageError("validate", "; ".join(report.issues))
    log.info("validate: %d nodes, %d tensors", len(g.nodes), len(g.tensors))
    log.info("train: out of scope, model weights used as given")

    graphs = [g]
    metrics = [{"step": 0, "params": accountant.count_params(g), "macs": accountant.count_macs(g)}]
    stopped = False
    if cfg.pruning.enabled:
        try:
            res = prune_stage(g, cfg)
        except (ValueError, RuntimeError) as e:
            raise StageError("prune", str(e))
        graphs, metrics, stopped = res.graphs, res.metrics, res.stopped_early
        for i, sg in enumerate(graphs):
            save_model(sg, out / "steps" / f"step_{i:02d}.epm")
        write_json(out / "prune_steps.json", metrics)
    pruned = graphs[-1]
    save_model(pruned, out / "pruned.epm")

    final = pruned
    quant_error = None
    if cfg.quantization.enabled:
        q = cfg.quantization
        samples = select_calibration(cfg)
        try:
            stats = calibrate(pruned, samples, keep_values=q.method == "mse")
        except (ValueError, RuntimeError) as e:
            raise StageError("calibrate", str(e))
        log.info("calibrate: %d samples", stats.count)
        try:
            qc = QuantConfig(q.activation_scheme, q.weight_scheme, q.weight_granularity, q.group_size,
                             q.method, tuple(q.op_subset), q.grid_size)
            params = build_params(pruned, stats, qc)
            final = rewrite_qdq(pruned, params, qc.op_subset)
            quant_error = measure_quant_error(pruned, final, samples[:q.error_samples])
        except (ValueError, RuntimeError) as e:
            raise StageError("quantize", str(e))
        save_model(final, out / "quantized.epm")
        write_json(out / "quant_error.json", quant_error)

    try:
        profile = accountant.load_profile(cfg.hardware_profile)
        base_fp = accountant.footprint(g)
        pruned_fp = accountant.footprint(pruned)
        final_fp = accountant.footprint(final)
        verdicts = accountant.fit_report(final_fp, profile)
    except (OSError, ValueError, KeyError) as e:
        raise StageError("account", str(e))
    write_json(out / "footprint.json", {"baseline": base_fp.to_dict(), "pruned": pruned_fp.to_dict(),
                                        "compressed": final_fp.to_dict()})
    write_json(out / "fit.json", fit_dicts(verdicts))

    try:
        battery = (powersim.load_battery(cfg.battery) if isinstance(cfg.battery, str)
                   else powersim.BatterySpec.from_dict(cfg.battery))
        cycle = powersim.DutyCycle.from_profile(profile, cfg.power.latency_s)
        energy = powersim.energy_report(cycle, battery, cfg.power.trace_duration_s)
        trace = powersim.simulate_trace(cycle, cfg.power.trace_duration_s)
    except (OSError, ValueError, KeyError) as e:
        raise StageError("power", str(e))
    write_json(out / "energy.json", energy)
    atomic_write(out / "trace.csv", powersim.trace_csv(trace).encode())
    log.info("deploy: code generation and on-device measurement are out of scope")

    rows = accountant.table2_summary(base_fp, final_fp, profile)
    result = {
        "model": metadata_name(g),
        "profile": profile.to_dict(),
        "baseline": base_fp.to_dict(),
        "pruned": pruned_fp.to_dict(),
        "compressed": final_fp.to_dict(),
        "retained_params": final_fp.params / base_fp.params if base_fp.params else 1.0,
        "weight_compression": base_fp.weight_bytes / final_fp.weight_bytes if final_fp.weight_bytes else 0.0,
        "prune_steps": metrics,
        "stopped_early": stopped,
        "quant_error": quant_error,
        "fit": fit_dicts(verdicts),
        "fits": all(v.passed for v in verdicts),
        "energy": energy,
        "reference": accountant.REFERENCE_TABLE,
        "summary_table": rows,
    }
    if "json" in cfg.report_formats:
        write_json(out / "report.json", result)
    if "table" in cfg.report_formats:
        atomic_write(out / "summary.txt", (accountant.format_table(rows) + "\n").encode())
    return result


def metadata_name(g: ModelGraph) -> str:
    return str(g.metadata.get("name", "model"))


def sweep(cfg: PipelineConfig, variable: str, values: list[float]) -> list[dict[str, Any]]:
    """Prune the model once per value of ``k`` or ``r_target`` and tabulate
    retained parameters, MACs and the pruning metric."""
    if variable not in ("k", "r_target"):
        raise ConfigError(f"sweep variable must be 'k' or 'r_target', got {variable!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    g = load_graph(cfg.model, cfg.seed)
    p0 = accountant.count_params(g)
    rows = []
    for v in values:
        c = copy.deepcopy(cfg)
        if variable == "k":
            c.pruning.k = int(v)
        else:
            c.pruning.r_target = float(v)
        if not 0.0 < c.pruning.r_target < 1.0 or c.pruning.k < 1:
            raise ConfigError(f"invalid sweep value {v}")
        res = prune_stage(g, c)
        last = res.metrics[-1]
        rows.append({
            "value": v,
            "retained_params_pct": 100.0 * last["params"] / p0,
            "params": last["params"],
            "macs": last["macs"],
            "metric": last["metric"],
            "steps_run": len(res.metrics) - 1,
        })
    return rows


def default_config_doc(model: str = "fixture:toy_yolo", calibration_dir: str | None = "calib") -> dict:
    cfg = PipelineConfig(model=model)
    cfg.quantization.calibration_dir = calibration_dir
    return cfg.to_dict()


