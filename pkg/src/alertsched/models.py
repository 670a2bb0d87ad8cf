"""Right-hand sides and auxiliary quantities for all three sleep models.

Every function here is a pure evaluation: no integration, no mutable state.
Units are hours for time, lux for light, mV for potentials, nM for the PR
homeostat. The sleep mode carries the discrete state beta (0 awake, 1 asleep)
plus a forced-wake flag used during scheduled shifts and deprivation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .params import CircadianParams, ModelParams, NeuronalParams, ThreeProcessParams

TP = "tp"
PR_FULL = "pr-full"
PR_HYBRID = "pr-hybrid"
MODEL_KINDS = (TP, PR_FULL, PR_HYBRID)


@dataclass(frozen=True)
class SleepMode:
    """Discrete sleep state: beta = 1 asleep, 0 awake; forced wake implies awake."""

    beta: int = 0
    forced_wake: bool = False

    def __post_init__(self) -> None:
        if self.beta not in (0, 1):
            raise ValueError("beta must be 0 or 1")
        if self.forced_wake and self.beta == 1:
            raise ValueError("forced wakefulness requires beta = 0")


AWAKE = SleepMode(0, False)
ASLEEP = SleepMode(1, False)
FORCED_WAKE = SleepMode(0, True)


@dataclass(frozen=True)
class CircadianState:
    x: float
    x_c: float
    n: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.n <= 1.0:
            raise ValueError("photoreceptor fraction n must lie in [0, 1]")


@dataclass(frozen=True)
class ThresholdSet:
    """Homeostat thresholds; all affine in the circadian drive C."""

    H_plus: float
    H_minus: float
    H_plus_max: float
    H_minus_max: float


def photic_drive_u(I: float, n: float, mode: SleepMode, params: CircadianParams) -> float:
    """Photic drive u = G alpha_0 (I/I_0)^p (1-beta)(1-n); zero while asleep."""
    if I < 0:
        raise ValueError("light intensity must be non-negative")
    if mode.beta == 1 or I == 0.0:
        return 0.0
    return params.G * params.alpha_0 * (I / params.I_0) ** params.p * (1.0 - n)


def circadian_rhs(
    s: CircadianState, I: float, mode: SleepMode, params: CircadianParams
) -> tuple[float, float, float]:
    """Pacemaker derivatives (dx/dt, dx_c/dt, dn/dt).

    The 60 in dn/dt converts the per-minute receptor kinetics to per-hour;
    it applies to both the activation and recovery terms.
    """
    u = photic_drive_u(I, s.n, mode, params)
    x, x_c, n = s.x, s.x_c, s.n
    pi12 = math.pi / 12.0
    gate = (1.0 - 0.4 * x) * (1.0 - params.k_c * x_c)
    dx = pi12 * (
        x_c
        + params.mu * (x / 3.0 + 4.0 * x**3 / 3.0 - 256.0 * x**7 / 105.0)
        + gate * u
    )
    dx_c = pi12 * (
        -((24.0 / (0.99729 * params.tau_x)) ** 2) * x
        + (params.q * x_c - params.k * x) * gate * u
    )
    dn = 60.0 * (
        params.alpha_0 * (I / params.I_0) ** params.p * (1 - mode.beta) * (1.0 - n)
        - params.gamma * n
    )
    return dx, dx_c, dn


def q_sigmoid(V: float, params: NeuronalParams) -> float:
    """Firing rate Q(V) = Q_max / (1 + exp(-(V - theta)/sigma))."""
    arg = -(V - params.theta) / params.sigma
    if arg > 700.0:  # exp would overflow; the rate is numerically zero
        return 0.0
    return params.Q_max / (1.0 + math.exp(arg))


def q_sigmoid_deriv(V: float, params: NeuronalParams) -> float:
    """dQ/dV = Q (1 - Q/Q_max) / sigma."""
    Q = q_sigmoid(V, params)
    return Q * (1.0 - Q / params.Q_max) / params.sigma


def circadian_drive_C(s: CircadianState, params: NeuronalParams) -> float:
    return 0.5 * (1.0 + params.c_x * s.x + params.c_xc * s.x_c)


def sleep_drive_Dv(C: float, H: float, params: NeuronalParams) -> float:
    return -params.v_vc * C + params.v_vh * H + params.A_v


def thresholds(C: float, params: NeuronalParams) -> ThresholdSet:
    """Homeostat levels where D_v equals 2.46 / 1.45 and the comfort bounds.

    The comfort bounds 3.43 and 2.11 extend the bistable boundaries by the
    amount of homeostatic drift accumulated in roughly two hours.
    """
    base = -params.A_v + params.v_vc * C
    return ThresholdSet(
        H_plus=(2.46 + base) / params.v_vh,
        H_minus=(1.45 + base) / params.v_vh,
        H_plus_max=(3.43 + base) / params.v_vh,
        H_minus_max=(2.11 + base) / params.v_vh,
    )


def homeostasis_rhs_tp(H: float, mode: SleepMode, params: ThreeProcessParams) -> float:
    """Process S: discharge toward 0 asleep, recover toward 1 awake."""
    if mode.beta == 1:
        return -H / params.tau_d
    return (1.0 - H) / params.tau_r


def homeostasis_rhs_pr(H: float, Q_m: float, params: NeuronalParams) -> float:
    return (-H + params.mu_H * Q_m) / params.chi


def inertia_rhs(W: float, mode: SleepMode, params: ThreeProcessParams) -> float:
    """Process W decays only while awake; it is frozen during sleep."""
    return -(1 - mode.beta) * W / params.tau_W


def sleep_propensity_phi(H: float, x: float, params: ThreeProcessParams) -> float:
    return H - params.A_c * x


def full_pr_rhs(
    state: tuple[float, float, float, float, float, float],
    I: float,
    mode: SleepMode,
    params: ModelParams,
) -> tuple[float, float, float, float, float, float]:
    """Six derivatives of the full PR model (x, x_c, n, V_m, V_v, H).

    During forced wakefulness V_m is clamped at V_m_forced (wake effort), so
    its derivative is zero and the MA firing rate is evaluated at the clamp.
    """
    x, x_c, n, V_m, V_v, H = state
    np_ = params.neuronal
    # the six-state neuronal model carries no discrete sleep state, so
    # retinal light input is not gated by sleep; sleep/wake is only read
    # off V_m afterwards (the discrete-mode models gate through beta)
    dx, dx_c, dn = circadian_rhs(
        CircadianState(x, x_c, n), I, AWAKE, params.circadian)
    if mode.forced_wake:
        V_m = np_.V_m_forced
        dV_m = 0.0
    Q_m = q_sigmoid(V_m, np_)
    Q_v = q_sigmoid(V_v, np_)
    if not mode.forced_wake:
        dV_m = (-V_m - np_.v_mv * Q_v + np_.A_m) / np_.tau_m
    C = circadian_drive_C(CircadianState(x, x_c, n), np_)
    D_v = sleep_drive_Dv(C, H, np_)
    dV_v = (-V_v - np_.v_vm * Q_m + D_v) / np_.tau_v
    dH = homeostasis_rhs_pr(H, Q_m, np_)
    return dx, dx_c, dn, dV_m, dV_v, dH


def alertness_tp(x: float, H: float, W: float, mode: SleepMode, params: ThreeProcessParams) -> float:
    """A_TP = (1-beta)(1 + A_c x - H - W); sleepiness is B = 1 - A."""
    if mode.beta == 1:
        return 0.0
    return 1.0 + params.A_c * x - H - W


def alertness_pr(H: float, H_plus: float, mode: SleepMode) -> float:
    """PR-family alertness A = (1-beta)(H+ - H)."""
    if mode.beta == 1:
        return 0.0
    return H_plus - H


def sleepiness_tp(A: float) -> float:
    return 1.0 - A


def circadian_phase(x: float, x_c: float) -> float:
    """Phase -atan2(x_c, x) in radians; undefined at the origin."""
    if x == 0.0 and x_c == 0.0:
        raise ValueError("phase undefined at the origin")
    return -math.atan2(x_c, x)


def unwrap_phase(phases: "list[float]") -> list[float]:
    """Continuous unwrap of a sampled phase series (shifts by 2*pi as needed)."""
    out = [phases[0]]
    for p in phases[1:]:
        prev = out[-1]
        d = p - prev
        while d > math.pi:
            d -= 2.0 * math.pi
        while d < -math.pi:
            d += 2.0 * math.pi
        out.append(prev + d)
    return out
