"""Command line front end: ``edgepress <verb> [options]``.

Exit codes: 0 success, 1 a budget verdict failed or the model is invalid,
2 usage or config error, 10-15 a pipeline stage failed (see STAGE_CODES).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from edgepress import accountant, powersim
from edgepress.container import atomic_write, save_model
from edgepress.fixtures import FIXTURE_KINDS, gen_fixture
from edgepress.graph import validate
from edgepress.pipeline import (
    STAGE_CODES, ConfigError, PipelineConfig, StageError, dump_json, load_config, load_graph, parse_config,
    prune_stage, run_pipeline, select_calibration, sweep, write_calibration_set, write_json,
)
from edgepress.qparams import QuantParams
from edgepress.quantizer import QuantConfig, build_params, calibrate, rewrite_qdq

log = logging.getLogger("edgepress")


def _setup_logging() -> None:
    level = os.environ.get("EDGEPRESS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _emit(obj, fmt: str, rows: list[list[str]] | None = None) -> None:
    if fmt == "table" and rows:
        print(accountant.format_table(rows))
    else:
        sys.stdout.write(dump_json(obj).decode())


def _base_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig(model=getattr(args, "model", "") or "")
    if getattr(args, "model", None):
        cfg.model = args.model
    if args.out:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    cfg = _base_config(args)
    g = load_graph(cfg.model, cfg.seed)
    rep = validate(g)
    obj = {"ok": rep.ok, "issues": rep.issues, "nodes": len(g.nodes), "tensors": len(g.tensors),
           "params": accountant.count_params(g) if rep.ok else None}
    rows = [["Check", "Result"], ["valid", str(rep.ok)], ["nodes", str(len(g.nodes))]]
    rows += [["issue", i] for i in rep.issues]
    _emit(obj, args.format, rows)
    return 0 if rep.ok else 1


def cmd_prune(args) -> int:
    cfg = _base_config(args)
    p = cfg.pruning
    for name in ("r_target", "k", "scope", "target"):
        v = getattr(args, name)
        if v is not None:
            setattr(p, name, v)
    if args.exclude_node:
        p.exclude_nodes = list(args.exclude_node)
    if args.exclude_tag is not None:
        p.exclude_tags = list(args.exclude_tag)
    cfg = _recheck(cfg)
    g = load_graph(cfg.model, cfg.seed)
    res = prune_stage(g, cfg)
    out = _out_dir(cfg)
    for i, sg in enumerate(res.graphs):
        save_model(sg, out / "steps" / f"step_{i:02d}.epm")
    save_model(res.final, out / "pruned.epm")
    write_json(out / "prune_steps.json", res.metrics)
    rows = [["step", "params", "macs", "retained", "metric"]]
    rows += [[str(m["step"]), str(m["params"]), str(m["macs"]), f"{m['retained']:.4f}", f"{m['metric']:.6f}"]
             for m in res.metrics]
    _emit({"steps": res.metrics, "stopped_early": res.stopped_early}, args.format, rows)
    return 0


def _recheck(cfg: PipelineConfig) -> PipelineConfig:
    return parse_config(cfg.to_dict())


def _quant_config(cfg: PipelineConfig, args) -> QuantConfig:
    q = cfg.quantization
    if getattr(args, "method", None):
        q.method = args.method
    return QuantConfig(q.activation_scheme, q.weight_scheme, q.weight_granularity, q.group_size,
                       q.method, tuple(q.op_subset), q.grid_size)


def _calibrated_params(cfg: PipelineConfig, args, g):
    q = cfg.quantization
    if args.calib_dir:
        q.calibration_dir = args.calib_dir
    if args.count:
        q.sample_count = args.count
    qc = _quant_config(cfg, args)
    samples = select_calibration(cfg)
    stats = calibrate(g, samples, keep_values=qc.method == "mse")
    return build_params(g, stats, qc), qc, stats.count


def cmd_calibrate(args) -> int:
    cfg = _base_config(args)
    g = load_graph(cfg.model, cfg.seed)
    params, _, count = _calibrated_params(cfg, args, g)
    doc = {t: p.to_dict() for t, p in sorted(params.items())}
    write_json(_out_dir(cfg) / "qparams.json", doc)
    rows = [["tensor", "scheme", "entries", "scale[0]", "zero_point[0]"]]
    rows += [[t, p.scheme, str(len(p.scale)), f"{p.scale[0]:.6g}", f"{p.zero_point[0]:.6g}"]
             for t, p in sorted(params.items())]
    _emit({"samples": count, "params": doc}, args.format, rows)
    return 0


def cmd_quantize(args) -> int:
    cfg = _base_config(args)
    g = load_graph(cfg.model, cfg.seed)
    if args.qparams:
        doc = json.loads(Path(args.qparams).read_text())
        params = {t: QuantParams.from_dict(d) for t, d in doc.items()}
        qc = _quant_config(cfg, args)
    else:
        params, qc, _ = _calibrated_params(cfg, args, g)
    qg = rewrite_qdq(g, params, qc.op_subset)
    out = _out_dir(cfg)
    save_model(qg, out / "quantized.epm")
    before, after = accountant.weight_bytes(g), accountant.weight_bytes(qg)
    obj = {"weight_bytes_float": before, "weight_bytes_quantized": after,
           "ratio": before / after if after else 0.0}
    rows = [["weight bytes", "float", "quantized", "ratio"],
            ["", str(before), str(after), f"{obj['ratio']:.4f}"]]
    _emit(obj, args.format, rows)
    return 0


def cmd_account(args) -> int:
    cfg = _base_config(args)
    profile = accountant.load_profile(args.profile or cfg.hardware_profile)
    g = load_graph(cfg.model, cfg.seed)
    fp = accountant.footprint(g)
    verdicts = accountant.fit_report(fp, profile)
    obj = {"footprint": fp.to_dict(), "fit": [v.__dict__ for v in verdicts], "profile": profile.name}
    rows = [["resource", "used", "budget", "verdict", "headroom %"]]
    rows += [[v.resource, f"{v.used_bytes:.0f}", f"{v.budget_bytes:.0f}", "pass" if v.passed else "FAIL",
              f"{v.headroom_pct:.2f}"] for v in verdicts]
    rows += [["params", str(fp.params), "-", "-", "-"], ["macs", str(fp.macs), "-", "-", "-"]]
    if args.out:
        write_json(_out_dir(cfg) / "footprint.json", fp.to_dict())
        write_json(_out_dir(cfg) / "fit.json", obj["fit"])
    _emit(obj, args.format, rows)
    return 0 if all(v.passed for v in verdicts) else 1


def cmd_power(args) -> int:
    cfg = _base_config(args)
    profile = accountant.load_profile(args.profile or cfg.hardware_profile)
    if args.battery:
        battery = powersim.load_battery(args.battery)
    elif isinstance(cfg.battery, str):
        battery = powersim.load_battery(cfg.battery)
    else:
        battery = powersim.BatterySpec.from_dict(cfg.battery)
    latency = args.latency if args.latency is not None else cfg.power.latency_s
    duration = args.duration if args.duration is not None else cfg.power.trace_duration_s
    cycle = powersim.DutyCycle.from_profile(profile, latency)
    rep = powersim.energy_report(cycle, battery, duration)
    if args.out:
        out = _out_dir(cfg)
        write_json(out / "energy.json", rep)
        atomic_write(out / "trace.csv", powersim.trace_csv(powersim.simulate_trace(cycle, duration)).encode())
    rows = [["quantity", "value"]] + [[k, f"{v:.6g}"] for k, v in rep.items()]
    _emit(rep, args.format, rows)
    return 0


def cmd_pipeline(args) -> int:
    if not args.config:
        raise ConfigError("pipeline needs --config")
    cfg = _base_config(args)
    rep = run_pipeline(cfg)
    _emit(rep, args.format, rep["summary_table"])
    return 0 if rep["fits"] else 1


def cmd_sweep(args) -> int:
    cfg = _base_config(args)
    values = [float(v) for v in args.values.split(",") if v.strip()] if args.values else []
    if args.variable == "k":
        values = [int(v) for v in values]
    rows = sweep(cfg, args.variable, values)
    if args.out:
        write_json(_out_dir(cfg) / f"sweep_{args.variable}.json", rows)
    table = [[args.variable, "retained %", "macs", "metric"]]
    table += [[str(r["value"]), f"{r['retained_params_pct']:.2f}", str(r["macs"]), f"{r['metric']:.6f}"]
              for r in rows]
    _emit(rows, args.format, table)
    return 0


def cmd_gen_fixture(args) -> int:
    seed = args.seed if args.seed is not None else 0
    g = gen_fixture(args.kind, seed)
    path = Path(args.out or f"{args.kind}_{seed}.epm")
    if path.suffix != ".epm":
        path = path / f"{args.kind}_{seed}.epm"
    save_model(g, path)
    obj = {"path": path.name, "kind": args.kind, "seed": seed, "params": accountant.count_params(g)}
    if args.calib_dir:
        files = write_calibration_set(g, args.calib_dir, args.calib_count, seed)
        obj["calibration_samples"] = len(files)
    _emit(obj, args.format, [["key", "value"]] + [[k, str(v)] for k, v in obj.items()])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--out", help="output directory (or file for gen-fixture)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--format", choices=("json", "table"), default="json")

    ap = argparse.ArgumentParser(prog="edgepress", description="Compress and account CNN graphs for MCU targets.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_, model=True):
        p = sub.add_parser(name, parents=[common], help=help_)
        if model:
            p.add_argument("model", nargs="?", help="model .epm path or fixture:<kind>")
        p.set_defaults(fn=fn)
        return p

    verb("validate", cmd_validate, "check a model graph")
    p = verb("prune", cmd_prune, "run the iterative pruning schedule")
    p.add_argument("--r-target", type=float, dest="r_target")
    p.add_argument("--k", type=int)
    p.add_argument("--scope", choices=("local", "global"))
    p.add_argument("--target", choices=("params", "channels"))
    p.add_argument("--exclude-node", action="append")
    p.add_argument("--exclude-tag", action="append")
    for name, fn, help_ in (("calibrate", cmd_calibrate, "derive quantization params"),
                            ("quantize", cmd_quantize, "rewrite into a QDQ model")):
        p = verb(name, fn, help_)
        p.add_argument("--calib-dir")
        p.add_argument("--count", type=int)
        p.add_argument("--method", choices=("min-max", "mse"))
        if name == "quantize":
            p.add_argument("--qparams", help="params JSON written by calibrate")
    p = verb("account", cmd_account, "footprint and budget verdicts")
    p.add_argument("--profile", help="preset name or profile JSON")
    p = verb("power", cmd_power, "duty-cycle energy and battery life", model=False)
    p.add_argument("--profile")
    p.add_argument("--battery", help="battery JSON")
    p.add_argument("--latency", type=float)
    p.add_argument("--duration", type=float)
    verb("pipeline", cmd_pipeline, "run every stage from a config", model=False)
    p = verb("sweep", cmd_sweep, "prune once per value of k or r_target")
    p.add_argument("--variable", choices=("k", "r_target"), required=True)
    p.add_argument("--values", help="comma separated")
    p = sub.add_parser("gen-fixture", parents=[common], help="write a seeded fixture model")
    p.add_argument("kind", choices=FIXTURE_KINDS)
    p.add_argument("--calib-dir", help="also write calibration inputs here")
    p.add_argument("--calib-count", type=int, default=300)
    p.set_defaults(fn=cmd_gen_fixture)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "model", "missing") is None and not args.config:
            raise ConfigError(f"{args.verb} needs a model path or --config")
        return args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ConfigError as e:
        print(f"error: [config] {e}", file=sys.stderr)
        return STAGE_CODES["config"]
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
