"""Affine quantization parameters and the scalar/array quantize maps.

Codes follow ``q = clamp(round(x / s) - round(z), qmin, qmax)`` and
``x_hat = s * (q + round(z))`` with ``z = theta_min / s``. Rounding is
half-to-even throughout. Asymmetric codes live in ``[0, 2**b - 1]``;
symmetric codes are signed, ``[-(2**(b-1) - 1), 2**(b-1) - 1]``, with
``z == 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

SCHEMES = ("asymmetric", "symmetric")
GRANULARITIES = ("per-tensor", "per-channel", "per-group")
SUPPORTED_BITS = (8,)


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: tuple[float, ...]
    zero_point: tuple[float, ...]
    bits: int = 8
    scheme: str = "asymmetric"
    granularity: str = "per-tensor"
    axis: int | None = None
    group_size: int | None = None

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantError(f"unsupported bit width {self.bits}; only 8 is implemented")
        if self.scheme not in SCHEMES:
            raise QuantError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in GRANULARITIES:
            raise QuantError(f"unknown granularity {self.granularity!r}")
        if len(self.scale) != len(self.zero_point) or not self.scale:
            raise QuantError("scale and zero_point must be non-empty and of equal length")
        if not all(math.isfinite(s) and s > 0 for s in self.scale):
            raise QuantError("scales must be positive and finite")
        if self.scheme == "symmetric" and any(z != 0 for z in self.zero_point):
            raise QuantError("symmetric params require zero_point == 0")
        if self.granularity == "per-tensor" and len(self.scale) != 1:
            raise QuantError("per-tensor params carry exactly one scale")
        if self.granularity != "per-tensor" and self.axis is None:
            raise QuantError(f"{self.granularity} params need an axis")
        if self.granularity == "per-group" and not self.group_size:
            raise QuantError("per-group params need group_size")

    @property
    def rounded_zero_point(self) -> tuple[int, ...]:
        return tuple(int(round(z)) for z in self.zero_point)

    @property
    def qmin(self) -> int:
        return 0 if self.scheme == "asymmetric" else -(2 ** (self.bits - 1) - 1)

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1 if self.scheme == "asymmetric" else 2 ** (self.bits - 1) - 1

    @property
    def storage_dtype(self) -> str:
        return "uint8" if self.scheme == "asymmetric" else "int8"

    def check_shape(self, shape: Sequence[int], where: str = "") -> None:
        n = _expected_count(self, shape)
        if n != len(self.scale):
            raise QuantError(f"{len(self.scale)} scales for tensor {list(shape)} ({self.granularity}) at {where}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scale": list(self.scale),
            "zero_point": list(self.zero_point),
            "bits": self.bits,
            "scheme": self.scheme,
            "granularity": self.granularity,
            "axis": self.axis,
            "group_size": self.group_size,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> QuantParams:
        return cls(
            scale=tuple(float(v) for v in d["scale"]),
            zero_point=tuple(float(v) for v in d["zero_point"]),
            bits=int(d.get("bits", 8)),
            scheme=d.get("scheme", "asymmetric"),
            granularity=d.get("granularity", "per-tensor"),
            axis=d.get("axis"),
            group_size=d.get("group_size"),
        )


def _expected_count(p: QuantParams, shape: Sequence[int]) -> int:
    if p.granularity == "per-tensor":
        return 1
    rows = int(shape[p.axis])
    if p.granularity == "per-channel":
        return rows
    cols = int(np.prod(shape, dtype=np.int64)) // rows
    return rows * -(-cols // p.group_size)


def scale_zero_point(theta_min: float, theta_max: float, scheme: str = "asymmetric",
                     bits: int = 8) -> tuple[float, float]:
    """(s, z) for a range. A degenerate range keeps its single value exact."""
    if not (math.isfinite(theta_min) and math.isfinite(theta_max)):
        raise QuantError(f"non-finite range ({theta_min}, {theta_max})")
    if theta_min > theta_max:
        raise QuantError(f"inverted range ({theta_min}, {theta_max})")
    if scheme == "symmetric":
        m = max(abs(theta_min), abs(theta_max))
        if m == 0.0:
            return 1.0, 0.0
        if theta_min == theta_max:
            return m, 0.0  # c maps to code +-1
        return m / (2 ** (bits - 1) - 1), 0.0
    if theta_min == theta_max:
        c = theta_min
        if c == 0.0:
            return 1.0, 0.0
        # c/s == +-1 exactly; z = -1 shifts a negative c onto code 0
        return abs(c), (-1.0 if c < 0 else 0.0)
    s = (theta_max - theta_min) / (2 ** bits - 1)
    return s, theta_min / s


def params_from_ranges(mins: Sequence[float], maxs: Sequence[float], scheme: str = "asymmetric",
                       granularity: str = "per-tensor", axis: int | None = None,
                       group_size: int | None = None, bits: int = 8) -> QuantParams:
    pairs = [scale_zero_point(float(lo), float(hi), scheme, bits) for lo, hi in zip(mins, maxs)]
    return QuantParams(
        scale=tuple(s for s, _ in pairs),
        zero_point=tuple(z for _, z in pairs),
        bits=bits, scheme=scheme, granularity=granularity, axis=axis, group_size=group_size,
    )


def quantize_value(x: float, p: QuantParams, index: int = 0) -> int:
    if not math.isfinite(x):
        raise QuantError(f"cannot quantize non-finite value {x}")
    s = p.scale[index]
    zq = p.rounded_zero_point[index]
    q = round(x / s) - zq
    return int(min(max(q, p.qmin), p.qmax))


def dequantize_value(q: int, p: QuantParams, index: int = 0) -> float:
    return p.scale[index] * (q + p.rounded_zero_point[index])


def _expand(p: QuantParams, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Scale and rounded zero point broadcast to ``shape`` (float64)."""
    s = np.asarray(p.scale, dtype=np.float64)
    z = np.asarray(p.rounded_zero_point, dtype=np.float64)
    if p.granularity == "per-tensor":
        return s.reshape(()), z.reshape(())
    if p.granularity == "per-channel":
        bshape = [1] * len(shape)
        bshape[p.axis] = shape[p.axis]
        return s.reshape(bshape), z.reshape(bshape)
    # per-group: rows along ``axis``, row-major columns chunked by group_size
    rows = shape[p.axis]
    cols = int(np.prod(shape, dtype=np.int64)) // rows
    ngroups = -(-cols // p.group_size)
    col_group = np.arange(cols) // p.group_size
    s2 = s.reshape(rows, ngroups)[:, col_group]
    z2 = z.reshape(rows, ngroups)[:, col_group]
    moved = [shape[p.axis]] + [d for i, d in enumerate(shape) if i != p.axis]
    s_full = np.moveaxis(s2.reshape(moved), 0, p.axis)
    z_full = np.moveaxis(z2.reshape(moved), 0, p.axis)
    return s_full, z_full


def quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise QuantError("cannot quantize non-finite values")
    p.check_shape(x.shape)
    s, z = _expand(p, x.shape)
    q = np.rint(x.astype(np.float64) / s) - z
    return np.clip(q, p.qmin, p.qmax).astype(p.storage_dtype)


def dequantize_array(q: np.ndarray, p: QuantParams, dtype=np.float32) -> np.ndarray:
    """Float values of integer codes; float32 matches the executor, float64
    keeps the exact affine result for error analysis."""
    q = np.asarray(q)
    p.check_shape(q.shape)
    s, z = _expand(p, q.shape)
    return (s * (q.astype(np.float64) + z)).astype(dtype)
