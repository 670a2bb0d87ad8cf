"""Piecewise-constant light schedules.

Light is represented on a uniform grid anchored at t = 0 (6 AM wall clock):
bin k covers [k*step, (k+1)*step) and holds a constant illuminance in lux.
The optimizer treats each bin as one decision variable, so the grid is also
the gradient discretization.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class LightSignal:
    grid_step_h: float
    values_lux: tuple[float, ...]
    period_h: float | None = None

    def __post_init__(self) -> None:
        if not (self.grid_step_h > 0 and math.isfinite(self.grid_step_h)):
            raise ValueError("grid_step_h must be positive and finite")
        if len(self.values_lux) == 0:
            raise ValueError("light signal needs at least one bin")
        if any(not math.isfinite(v) or v < 0 for v in self.values_lux):
            raise ValueError("illuminance values must be finite and non-negative")
        if self.period_h is not None:
            if abs(self.period_h - self.end_h) > 1e-9:
                raise ValueError(
                    f"period_h {self.period_h} must equal the grid span {self.end_h}"
                )

    @property
    def n_bins(self) -> int:
        return len(self.values_lux)

    @property
    def end_h(self) -> float:
        return self.n_bins * self.grid_step_h

    def bin_index(self, t: float) -> int:
        if self.period_h is not None:
            t = t % self.period_h
        # right endpoint queries fall back to the last bin: integration
        # samples include the closing edge of the final step
        idx = int(math.floor(t / self.grid_step_h + 1e-12))
        if idx == self.n_bins and t <= self.end_h + 1e-9:
            idx -= 1
        if not 0 <= idx < self.n_bins:
            raise ValueError(f"t={t} h is outside the light schedule [0, {self.end_h}]")
        return idx

    def value_at(self, t) -> float | np.ndarray:
        if np.ndim(t) == 0:
            return self.values_lux[self.bin_index(float(t))]
        return np.array([self.values_lux[self.bin_index(float(v))] for v in np.asarray(t)])

    def edges_between(self, lo: float, hi: float) -> list[float]:
        """Interior bin edges strictly inside (lo, hi), for step cutting."""
        step = self.grid_step_h
        first = math.floor(lo / step) + 1
        out = []
        k = first
        while k * step < hi - 1e-12:
            edge = k * step
            if edge > lo + 1e-12:
                out.append(edge)
            k += 1
        return out

    def with_values(self, values_lux) -> "LightSignal":
        return replace(self, values_lux=tuple(float(v) for v in values_lux))

    def to_json(self) -> str:
        doc = {
            "grid_step_h": self.grid_step_h,
            "values_lux": list(self.values_lux),
        }
        if self.period_h is not None:
            doc["period_h"] = self.period_h
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "LightSignal":
        doc = json.loads(text)
        return cls(
            grid_step_h=float(doc["grid_step_h"]),
            values_lux=tuple(float(v) for v in doc["values_lux"]),
            period_h=float(doc["period_h"]) if doc.get("period_h") is not None else None,
        )


def reference_light(grid_step_h: float = 0.1) -> LightSignal:
    """Indoor baseline: 150 lux from 6 AM to 10 PM, dark overnight, 24 h period."""
    n = round(24.0 / grid_step_h)
    if abs(n * grid_step_h - 24.0) > 1e-9:
        raise ValueError("grid_step_h must divide 24 h")
    values = tuple(150.0 if k * grid_step_h < 16.0 - 1e-12 else 0.0 for k in range(n))
    return LightSignal(grid_step_h=grid_step_h, values_lux=values, period_h=24.0)


def constant_light(lux: float, duration_h: float, grid_step_h: float = 0.1,
                   periodic: bool = False) -> LightSignal:
    n = max(1, round(duration_h / grid_step_h))
    return LightSignal(
        grid_step_h=grid_step_h,
        values_lux=(float(lux),) * n,
        period_h=n * grid_step_h if periodic else None,
    )
