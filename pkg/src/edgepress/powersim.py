"""Duty-cycle energy model: per-inference energy, average power, battery
life and a piecewise-constant current trace."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

from edgepress.accountant import HardwareProfile


@dataclass(frozen=True)
class DutyCycle:
    inference_latency: float  # s
    active_current: float  # A
    sleep_current: float  # A
    wake_period: float  # s
    supply_voltage: float  # V

    def __post_init__(self):
        if self.inference_latency < 0 or self.inference_latency > self.wake_period:
            raise ValueError("inference_latency must lie in [0, wake_period]")
        if self.active_current <= 0 or self.sleep_current <= 0:
            raise ValueError("currents must be positive")
        if self.wake_period <= 0 or self.supply_voltage <= 0:
            raise ValueError("wake_period and supply_voltage must be positive")

    @classmethod
    def from_profile(cls, profile: HardwareProfile, latency: float) -> DutyCycle:
        return cls(latency, profile.active_current, profile.sleep_current, profile.wake_period,
                   profile.supply_voltage)


@dataclass(frozen=True)
class BatterySpec:
    watt_hours: float

    def __post_init__(self):
        if self.watt_hours < 0:
            raise ValueError("battery capacity must be nonnegative")

    @classmethod
    def from_amp_hours(cls, amp_hours: float, nominal_voltage: float) -> BatterySpec:
        return cls(amp_hours * nominal_voltage)

    @classmethod
    def from_dict(cls, d: dict) -> BatterySpec:
        if "watt_hours" in d:
            return cls(float(d["watt_hours"]))
        return cls.from_amp_hours(float(d["amp_hours"]), float(d["nominal_voltage"]))


def load_battery(path: str | os.PathLike) -> BatterySpec:
    return BatterySpec.from_dict(json.loads(Path(path).read_text()))


def energy_per_inference(c: DutyCycle) -> float:
    """Joules drawn during one active burst: V * I * t."""
    return c.supply_voltage * c.active_current * c.inference_latency


def average_power(c: DutyCycle) -> float:
    charge = c.active_current * c.inference_latency + c.sleep_current * (c.wake_period - c.inference_latency)
    return c.supply_voltage * charge / c.wake_period


def battery_life(c: DutyCycle, battery: BatterySpec) -> float:
    """Days of operation, ignoring self-discharge and converter losses."""
    if battery.watt_hours == 0:
        return 0.0
    return battery.watt_hours / average_power(c) / 24.0


def simulate_trace(c: DutyCycle, duration: float) -> list[tuple[float, float, float]]:
    """Segments ``(t_start, t_end, current_A)``: a burst of ``inference_latency``
    at the active current at the start of every wake period, sleep otherwise."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    segs: list[tuple[float, float, float]] = []
    k = 0
    while True:
        t0 = k * c.wake_period
        if t0 >= duration:
            break
        t_act = min(t0 + c.inference_latency, duration)
        if t_act > t0:
            segs.append((t0, t_act, c.active_current))
        t_end = min(t0 + c.wake_period, duration)
        if t_end > t_act:
            segs.append((t_act, t_end, c.sleep_current))
        k += 1
    return segs


def active_bursts(c: DutyCycle, segs: list[tuple[float, float, float]]) -> int:
    return sum(1 for s in segs if s[2] == c.active_current and s[0] % c.wake_period == 0)


def trace_energy(c: DutyCycle, segs: list[tuple[float, float, float]]) -> float:
    return sum(c.supply_voltage * i * (t1 - t0) for t0, t1, i in segs)


def trace_csv(segs: list[tuple[float, float, float]]) -> str:
    """Step-shaped samples ``time_s,current_mA``: two rows per segment edge."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "current_mA"])
    for t0, t1, i in segs:
        w.writerow([f"{t0:.6f}", f"{i * 1e3:.6f}"])
        w.writerow([f"{t1:.6f}", f"{i * 1e3:.6f}"])
    return buf.getvalue()


def energy_report(c: DutyCycle, battery: BatterySpec, duration: float = 120.0) -> dict:
    segs = simulate_trace(c, duration)
    return {
        "energy_per_inference_J": energy_per_inference(c),
        "average_power_W": average_power(c),
        "battery_watt_hours": battery.watt_hours,
        "battery_life_days": battery_life(c, battery),
        "trace_duration_s": duration,
        "trace_energy_J": trace_energy(c, segs),
        "active_bursts": active_bursts(c, segs),
    }
