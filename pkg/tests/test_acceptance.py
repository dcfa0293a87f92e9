"""Acceptance suite: ten end-to-end criteria, each timed against its budget.

Every criterion prints one ``[PASS]`` or ``[FAIL]`` line. Under pytest the
lines are also collected into a terminal summary section; running this
file directly (``python3 tests/test_acceptance.py``) prints them as well.
"""

from __future__ import annotations

import sys
import time
from contextlib import contextmanager
from decimal import Decimal, getcontext
from pathlib import Path

import numpy as np

from edgepress.accountant import KB, PRESETS, count_params, fit_report, weight_bytes
from edgepress.executor import run_outputs
from edgepress.fixtures import gen_fixture, random_inputs, toy_yolo
from edgepress.powersim import (
    BatterySpec, DutyCycle, active_bursts, average_power, battery_life, energy_per_inference, simulate_trace,
    trace_energy,
)
from edgepress.pipeline import load_config, parse_config, run_pipeline, sweep, write_calibration_set
from edgepress.pruner import (
    Exclusions, PruningSchedule, apply_prune, build_dependency_groups, identity_hook, mask_channels, plan_step,
    run_schedule, score_channels,
)
from edgepress.qparams import dequantize_array, params_from_ranges, quantize_array
from edgepress.quantizer import (
    build_params, calibrate, derive_params, estimate_range, quant_mse, quantized_edges, rewrite_qdq,
    weight_params,
)

RESULTS: list[str] = []


@contextmanager
def criterion(num: int, title: str, budget_s: float):
    t0 = time.perf_counter()
    detail: dict[str, str] = {}
    try:
        yield detail
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"runtime {elapsed:.2f}s exceeds {budget_s:.0f}s"
    except AssertionError as e:
        line = f"[FAIL] {num:2d}. {title} ({time.perf_counter() - t0:.2f}s): {e}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"[PASS] {num:2d}. {title} ({elapsed:.2f}s)"
    if detail:
        line += " " + ", ".join(f"{k}={v}" for k, v in detail.items())
    RESULTS.append(line)
    print(line)


def test_c01_schedule_algebra():
    with criterion(1, "schedule algebra", 1.0) as d:
        getcontext().prec = 50
        exact = Decimal(1) - Decimal("0.3") ** (Decimal(1) / Decimal(6))
        per_step = PruningSchedule(0.7, 6).per_step
        rel = abs((Decimal(per_step) - exact) / exact)
        assert rel < Decimal("1e-12"), f"per_step {per_step!r} vs {exact}"
        assert f"{per_step:.12g}" == f"{float(exact):.12g}"
        assert abs((1 - per_step) ** 6 - 0.3) <= 1e-12
        d["per_step"] = f"{per_step:.15f}"


def test_c02_parameter_target():
    with criterion(2, "parameter-target fidelity", 30.0) as d:
        g = toy_yolo(0)
        res = run_schedule(g, PruningSchedule(0.7, 6), hook=identity_hook)
        retained = count_params(res.final) / count_params(g)
        assert len(res.graphs) == 7
        assert abs(retained - 0.30) <= 0.03, f"retained {retained:.4f}"
        d["retained"] = f"{100 * retained:.2f}%"


def test_c03_mask_equivalence():
    with criterion(3, "mask-equivalence oracle", 120.0) as d:
        rng = np.random.default_rng(2025)
        kinds = ("chain", "residual", "concat")
        exercised = 0
        for i in range(50):
            g = gen_fixture(kinds[i % 3], 1000 + i)
            groups = build_dependency_groups(g)
            sched = PruningSchedule(0.5, 1, exclusions=Exclusions(tags=(), concat=False), target="channels")
            plan = plan_step(groups, score_channels(g, groups), sched, 0, fraction=float(rng.uniform(0.2, 0.7)))
            pruned = apply_prune(g, groups, plan) if plan else g
            masked = mask_channels(g, groups, plan)
            exercised += bool(plan)
            for x in random_inputs(g, 3, i):
                a, b = run_outputs(masked, x), run_outputs(pruned, x)
                for u, v in zip(a, b):
                    assert np.array_equal(u, v), f"fixture {i}: max diff {np.abs(u - v).max()}"
        assert exercised >= 40, f"only {exercised} fixtures had a non-empty plan"
        d["fixtures_pruned"] = str(exercised)


def test_c04_quantization_roundtrip():
    with criterion(4, "quantization round-trip", 10.0) as d:
        rng = np.random.default_rng(4)
        n = 100_000
        center = rng.uniform(-1, 1, n) * 10.0 ** rng.uniform(-3, 3, n)
        width = 10.0 ** rng.uniform(-4, 3, n)
        width[rng.random(n) < 0.02] = 0.0
        lo, hi = center - width / 2, center + width / 2
        symmetric = rng.random(n) < 0.5
        checked = 0
        for scheme, m in (("asymmetric", ~symmetric), ("symmetric", symmetric)):
            p = params_from_ranges(lo[m], hi[m], scheme, "per-channel", axis=0)
            s, z = np.array(p.scale), np.array(p.zero_point)
            zr = np.array(p.rounded_zero_point, dtype=np.float64)
            if scheme == "symmetric":
                assert np.all(z == 0.0)
                mag = np.maximum(np.abs(lo[m]), np.abs(hi[m]))
                l, h = -mag, mag
            else:
                l, h = lo[m], hi[m]
            x = rng.uniform(l, h)
            deq = dequantize_array(quantize_array(x, p), p, np.float64)
            bound = s * (0.5 + np.abs(z - zr))
            # few-ulp allowance for the float64 arithmetic itself
            slack = 4 * np.spacing(np.maximum(np.abs(l), np.abs(h)))
            over = np.abs(x - deq) - (bound + slack)
            assert np.all(over <= 0), f"{scheme}: bound exceeded by {over.max()}"
            # monotone in x, including values outside the range
            a = x + rng.normal(0, 1, x.size) * (h - l + 1e-3)
            b = a + np.abs(rng.normal(0, 1, x.size)) * (h - l + 1e-3)
            qa, qb = quantize_array(a, p), quantize_array(b, p)
            assert np.all(qa.astype(np.int64) <= qb.astype(np.int64))
            da, db = dequantize_array(qa, p, np.float64), dequantize_array(qb, p, np.float64)
            assert np.all(da <= db)
            checked += int(m.sum())
        assert checked == n
        d["triples"] = str(checked)


def test_c05_calibration_dominance():
    with criterion(5, "calibration dominance", 120.0) as d:
        kinds = ("chain", "residual", "concat")
        tensors = convs = minmax_inversions = 0
        for i in range(20):
            g = gen_fixture(kinds[i % 3], 500 + i)
            stats = calibrate(g, random_inputs(g, 300, i), keep_values=True)
            for t in quantized_edges(g):
                v = stats.values[t]
                e_mm = quant_mse(v, derive_params(estimate_range(stats, "min-max", t)))
                e_mse = quant_mse(v, derive_params(estimate_range(stats, "mse", t)))
                assert e_mse <= e_mm, f"graph {i} tensor {t}: {e_mse} > {e_mm}"
                tensors += 1
            for n in g.nodes:
                if n.op_kind == "Conv2d":
                    w = g.constants[n.inputs[1]]
                    pc = quant_mse(w, weight_params(w, "symmetric", "per-channel", method="mse"))
                    pt = quant_mse(w, weight_params(w, "symmetric", "per-tensor", method="mse"))
                    assert pc <= pt, f"graph {i} conv {n.id}: {pc} > {pt}"
                    convs += 1
                    # informational: plain min-max ranges carry no such guarantee
                    minmax_inversions += quant_mse(w, weight_params(w, "symmetric", "per-channel")) > \
                        quant_mse(w, weight_params(w, "symmetric", "per-tensor"))
        d["tensors"] = str(tensors)
        d["convs"] = str(convs)
        d["minmax_inversions"] = str(int(minmax_inversions))


def test_c06_compression_accounting():
    with criterion(6, "compression accounting", 5.0) as d:
        g = toy_yolo(0)
        stats = calibrate(g, random_inputs(g, 8, 6))
        q = rewrite_qdq(g, build_params(g, stats))
        ratio = weight_bytes(g) / weight_bytes(q)
        assert ratio >= 3.9, f"weight-byte ratio {ratio:.4f}"
        flash, ram = fit_report({"flash_bytes": 850.97 * KB, "ram_peak_bytes": 677.30 * KB},
                                PRESETS["stm32u575zi"])
        assert flash.passed and ram.passed
        assert abs(flash.headroom_pct - 58.4) <= 0.1, f"flash headroom {flash.headroom_pct:.3f}"
        assert abs(ram.headroom_pct - 11.8) <= 0.1, f"ram headroom {ram.headroom_pct:.3f}"
        d["ratio"] = f"{ratio:.4f}"
        d["headroom"] = f"{flash.headroom_pct:.2f}%/{ram.headroom_pct:.2f}%"


def test_c07_energy_math():
    with criterion(7, "energy math", 1.0) as d:
        c = DutyCycle(1.510, 10.4e-3, 1.1e-3, 30.0, 3.3)
        e = energy_per_inference(c)
        assert e == 3.3 * 10.4e-3 * 1.510
        assert abs(e - 51.8e-3) / 51.8e-3 <= 0.005, f"E = {e}"
        segs = simulate_trace(c, 120.0)
        closed = average_power(c) * 120.0
        assert abs(trace_energy(c, segs) - closed) / closed <= 1e-9
        assert active_bursts(c, segs) == 4
        d["E"] = f"{1e3 * e:.4f} mJ"


def test_c08_battery_projection():
    with criterion(8, "battery projection", 1.0) as d:
        c = DutyCycle(1.510, 10.4e-3, 1.1e-3, 30.0, 3.3)
        days = battery_life(c, BatterySpec(25.9))
        assert days == 25.9 / average_power(c) / 24.0
        dev = (189.0 - days) / days
        assert abs(dev) <= 0.12, f"189 d is {100 * dev:.2f}% from {days:.2f} d"
        d["closed_form"] = f"{days:.2f} d"
        d["reported_189d_deviation"] = f"{100 * dev:.2f}%"


def test_c09_mac_monotonicity():
    with criterion(9, "MAC monotonicity and near-linear curve", 120.0) as d:
        cfg = parse_config({"model": "fixture:toy_yolo", "quantization": {"enabled": False}})
        values = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
        rows = sweep(cfg, "r_target", values)
        macs = np.array([r["macs"] for r in rows], float)
        params = np.array([r["params"] for r in rows], float)
        assert np.all(np.diff(macs) < 0), f"MACs {macs.tolist()}"
        slope, icpt = np.polyfit(params, macs, 1)
        resid = macs - (slope * params + icpt)
        r2 = 1 - resid @ resid / np.sum((macs - macs.mean()) ** 2)
        assert r2 >= 0.95, f"R^2 {r2:.4f}"
        d["R2"] = f"{r2:.4f}"


def test_c10_determinism(tmp_path):
    with criterion(10, "determinism", 60.0) as d:
        write_calibration_set(toy_yolo(0), tmp_path / "calib", 40, seed=3)
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(
            '{"model": "fixture:toy_yolo", "seed": 7, "hardware_profile": "toy-mcu",'
            ' "quantization": {"calibration_dir": "calib", "sample_count": 30}}')
        outs = []
        for name in ("run_a", "run_b"):
            cfg = load_config(cfg_path)
            cfg.output_dir = str(tmp_path / name)
            run_pipeline(cfg)
            outs.append(tmp_path / name)
        files = [sorted(p.relative_to(o) for p in o.rglob("*") if p.is_file()) for o in outs]
        assert files[0] == files[1]
        compared = [f for f in files[0] if f.suffix in (".epm", ".json")]
        for rel in compared:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), f"{rel} differs"
        d["artifacts"] = str(len(compared))


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in sorted(globals().items()):
        if not name.startswith("test_c"):
            continue
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
