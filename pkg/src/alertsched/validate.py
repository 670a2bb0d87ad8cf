"""Model validation against sleep-deprivation protocol data.

Two classic protocols are simulated and compared against published group
measurements via a variance-weighted affine fit:

* constant routine: after entrainment to the indoor reference light, the
  subject stays awake for 60 h under constant 150 lux while rating
  subjective alertness on a 100 mm visual-analog scale (VAS).
* short photoperiod: after a week of entrained 16 h light / 8 h dark days,
  the subject spends 24 h awake in dim light (< 1 lux) while Stanford
  Sleepiness Scale (SSS) scores are recorded.

Model output is an alertness channel in model units; the affine map
theta1 * A + theta2 onto the measurement scale is fit per model, and the
goodness of fit is the covariance-weighted squared error (NMSE). The
experimental series themselves are not bundled; they load from CSV.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .light import LightSignal, constant_light, reference_light
from .params import DEFAULT_PARAMS, ModelParams
from .simulate import (
    PR_FULL,
    TP,
    IntegratorConfig,
    SleepScheduleSpec,
    Trajectory,
    find_periodic_solution,
    integrate,
)

DATASET_LABELS = ("VAS", "SSS")


@dataclass
class DatasetSeries:
    """Experimental mean/std series sampled at hours since wake."""

    times: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    label: str

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.stds = np.asarray(self.stds, dtype=float)
        if self.label not in DATASET_LABELS:
            raise ValueError(f"label must be one of {DATASET_LABELS}")
        if not (self.times.shape == self.means.shape == self.stds.shape):
            raise ValueError("times, means, stds must have matching shapes")
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("dataset must be a non-empty 1-D series")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if np.any(self.stds <= 0) or not np.all(np.isfinite(self.stds)):
            raise ValueError("stds must be positive and finite")

    def __len__(self) -> int:
        return self.times.size

    @classmethod
    def from_csv(cls, path: str, label: str) -> "DatasetSeries":
        """Load a `t_h,mean,std` CSV (header required)."""
        times, means, stds = [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"t_h", "mean", "std"} - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                times.append(float(row["t_h"]))
                means.append(float(row["mean"]))
                stds.append(float(row["std"]))
        return cls(np.array(times), np.array(means), np.array(stds), label)


@dataclass
class FitResult:
    theta1: float
    theta2: float
    nmse: float

    def as_dict(self) -> dict:
        return {"theta1": self.theta1, "theta2": self.theta2, "nmse": self.nmse}


@dataclass
class ProtocolRun:
    """Dense protocol prediction; times are hours since protocol start (wake)."""

    model: str
    times: np.ndarray
    alertness: np.ndarray
    duration_h: float
    traj: Trajectory
    info: dict = field(default_factory=dict)

    def at(self, sample_times) -> np.ndarray:
        """Linearly interpolate predicted alertness at hours-since-wake."""
        st = np.asarray(sample_times, dtype=float)
        if st.size and (st.min() < -1e-9 or st.max() > self.duration_h + 1e-9):
            raise ValueError(
                f"sample times must lie within [0, {self.duration_h}] h of protocol start"
            )
        return np.interp(st, self.times, self.alertness)

    @property
    def sleepiness(self) -> np.ndarray:
        """B = 1 - A, defined for the three-process model only."""
        if self.model != TP:
            raise ValueError("sleepiness B = 1 - A applies to the three-process model")
        return 1.0 - self.alertness


def _protocol_cfg(model: str, cfg: IntegratorConfig | None) -> IntegratorConfig:
    if cfg is not None:
        return cfg
    return IntegratorConfig(method="rk45_adaptive") if model == PR_FULL else IntegratorConfig()


def _wake_time(traj: Trajectory) -> float:
    wakes = [t for t, kind in traj.events if kind == "woke"]
    if not wakes:
        raise ValueError("reference day has no spontaneous wake event")
    return wakes[-1]


def _awake_series(traj: Trajectory, t_start: float):
    """Protocol-clock (times, alertness) over the forced-wake samples.

    The instant the constraint lifts the subject can legitimately fall
    asleep (H is far above threshold after deprivation); dropping the
    asleep boundary samples keeps interpolation at the final protocol
    hour on the deprivation branch.
    """
    A = traj.channels()["A"]
    mask = traj.beta == 0
    return traj.times[mask] - t_start, A[mask]


def run_constant_routine(
    model: str,
    cfg: IntegratorConfig | None = None,
    params: ModelParams = DEFAULT_PARAMS,
    duration_h: float = 60.0,
    lux: float = 150.0,
    entrained: Trajectory | None = None,
) -> ProtocolRun:
    """60 h of forced wakefulness under constant light, from entrained wake.

    The protocol clock starts at the entrained spontaneous wake event, so
    predictions line up with datasets indexed by hours since waking.
    """
    cfg = _protocol_cfg(model, cfg)
    if entrained is None:
        entrained = find_periodic_solution(model, reference_light(), cfg, params=params)
    t_w = _wake_time(entrained)
    X0 = entrained.state_at(t_w)
    light = constant_light(lux, 24.0, periodic=True)
    schedule = SleepScheduleSpec(
        "forced_intervals", forced_wake_intervals=((t_w, t_w + duration_h),)
    )
    traj = integrate(
        model, X0, light, schedule, cfg,
        t0=t_w, tf=t_w + duration_h, beta0=0, params=params,
    )
    times, A = _awake_series(traj, t_w)
    return ProtocolRun(
        model=model,
        times=times,
        alertness=A,
        duration_h=duration_h,
        traj=traj,
        info={"wake_time_h": t_w, "entrain": dict(entrained.info)},
    )


def run_photoperiod(
    model: str,
    cfg: IntegratorConfig | None = None,
    params: ModelParams = DEFAULT_PARAMS,
    dim_lux: float = 0.5,
    lead_in_days: int = 7,
    entrained: Trajectory | None = None,
) -> ProtocolRun:
    """A 16L:8D week followed by 24 h of forced wake in dim light.

    The lead-in week integrates the entrained reference forward and checks
    that the day map stays periodic (mismatch recorded in info); the dim
    segment starts at the final spontaneous wake so the protocol clock is
    hours since waking.
    """
    cfg = _protocol_cfg(model, cfg)
    light = reference_light()
    if entrained is None:
        entrained = find_periodic_solution(model, light, cfg, params=params)
    X0 = entrained.states[0].copy()
    beta0 = int(entrained.beta[0])
    week = integrate(
        model, X0, light, SleepScheduleSpec("spontaneous"), cfg,
        t0=0.0, tf=24.0 * lead_in_days, beta0=beta0, params=params,
    )
    a = week.state_at(24.0 * (lead_in_days - 1))
    b = week.states[-1]
    lead_mismatch = float(np.max(np.abs(b - a) / np.maximum(1.0, np.abs(a))))
    wakes = [t for t, kind in week.events if kind == "woke"]
    if not wakes:
        raise ValueError("lead-in week produced no wake events")
    t_w = wakes[-1]
    dim = constant_light(dim_lux, 24.0, periodic=True)
    schedule = SleepScheduleSpec("forced_intervals", forced_wake_intervals=((t_w, t_w + 24.0),))
    traj = integrate(
        model, week.state_at(t_w), dim, schedule, cfg,
        t0=t_w, tf=t_w + 24.0, beta0=0, params=params,
    )
    times, A = _awake_series(traj, t_w)
    return ProtocolRun(
        model=model,
        times=times,
        alertness=A,
        duration_h=24.0,
        traj=traj,
        info={
            "wake_time_h": t_w,
            "lead_in_mismatch": lead_mismatch,
            "dim_lux": dim_lux,
            "entrain": dict(entrained.info),
        },
    )


def weighted_linear_fit(predicted, data: DatasetSeries) -> FitResult:
    """Closed-form weighted least squares of data onto theta1*A + theta2.

    Minimizes r^T Sigma^-1 r with r = M - (theta1 A + theta2) and
    Sigma = diag(std^2); the minimized quadratic form is the NMSE.
    Fitting to sleepiness rather than alertness only reparametrizes the
    affine map (theta1 -> -theta1, theta2 -> theta1 + theta2) and leaves
    the NMSE unchanged.
    """
    A = np.asarray(predicted, dtype=float)
    if A.shape != data.times.shape:
        raise ValueError("predicted series must match the dataset length")
    if not np.all(np.isfinite(A)):
        raise ValueError("predicted series contains non-finite values")
    if np.ptp(A) < 1e-12:
        raise ValueError("constant predicted series: affine fit is degenerate")
    w = 1.0 / data.stds**2
    X = np.column_stack([A, np.ones_like(A)])
    XtW = X.T * w
    theta = np.linalg.solve(XtW @ X, XtW @ data.means)
    r = data.means - X @ theta
    nmse = float(r @ (w * r))
    return FitResult(theta1=float(theta[0]), theta2=float(theta[1]), nmse=nmse)


def fit_protocol(run: ProtocolRun, data: DatasetSeries) -> FitResult:
    """Fit a protocol prediction to a dataset sampled on the same clock."""
    return weighted_linear_fit(run.at(data.times), data)


def fit_report(model: str, run: ProtocolRun, data: DatasetSeries) -> dict:
    fit = fit_protocol(run, data)
    return {"model": model, "label": data.label, **fit.as_dict()}
