"""Fast-subsystem equilibrium analysis and the V1/V2 branch functions.

The MA/VLPO pair relaxes within seconds, so its equilibria as a function of
the sleep drive D_v organize the slow dynamics. Setting dV_m/dt = dV_v/dt = 0
gives the scalar residual

    r(V_m) = -V_m - v_mv Q(-v_vm Q(V_m) + D_v) + A_m

whose roots are the equilibria. (The printed closed form of this equation
carries sign typos; the residual here comes straight from the ODEs and
reproduces the published bistable region [1.45, 2.46].) An equilibrium is
stable iff dr/dV_m < 0, which for this two-cell cascade coincides with the
2x2 Jacobian criterion v_mv v_vm Q'(V_v) Q'(V_m) < 1.
"""
from __future__ import annotations

import csv
import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .params import BranchCoefficients, ModelParams, NeuronalParams

V_SCAN_LO = -15.0
V_SCAN_HI = 5.0
V_SCAN_SUBDIVISIONS = 2000
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class EquilibriumSet:
    D_v: float
    roots: tuple[tuple[float, str], ...]
    region: str  # wake | bistable | sleep

    @property
    def stable_roots(self) -> tuple[float, ...]:
        return tuple(v for v, s in self.roots if s == "stable")


def _q(V: np.ndarray | float, p: NeuronalParams) -> np.ndarray | float:
    # np.exp overflows loudly for very negative V; clip the argument instead.
    arg = np.clip(-(np.asarray(V, dtype=float) - p.theta) / p.sigma, None, 700.0)
    return p.Q_max / (1.0 + np.exp(arg))


def _q_deriv(V: np.ndarray | float, p: NeuronalParams) -> np.ndarray | float:
    Q = _q(V, p)
    return Q * (1.0 - Q / p.Q_max) / p.sigma


def equilibrium_residual(V_m: np.ndarray | float, D_v: float, p: NeuronalParams):
    """r(V_m); roots are fast-subsystem equilibria at the given sleep drive."""
    V_v = -p.v_vm * _q(V_m, p) + D_v
    return -V_m - p.v_mv * _q(V_v, p) + p.A_m


def residual_slope(V_m: float, D_v: float, p: NeuronalParams) -> float:
    """dr/dV_m; negative slope means the equilibrium is stable."""
    V_v = -p.v_vm * _q(V_m, p) + D_v
    return -1.0 + p.v_mv * p.v_vm * _q_deriv(V_v, p) * _q_deriv(V_m, p)


def _bisect_root(lo: float, hi: float, D_v: float, p: NeuronalParams) -> float:
    r_lo = equilibrium_residual(lo, D_v, p)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r_mid = equilibrium_residual(mid, D_v, p)
        if abs(r_mid) < RESIDUAL_TOL or (hi - lo) < 1e-15:
            return mid
        if (r_lo > 0) == (r_mid > 0):
            lo, r_lo = mid, r_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _scan_grid(D_v: float, params: NeuronalParams) -> np.ndarray:
    """Scan grid for the sign sweep, extended below -15 mV when needed.

    r(V) -> +inf as V -> -inf, so a negative residual at the lower edge
    means the sleep root escaped the nominal bracket (it drifts below -15 mV
    once D_v exceeds about 3.1); extend downward until the edge sign is safe.
    """
    step = (V_SCAN_HI - V_SCAN_LO) / V_SCAN_SUBDIVISIONS
    lo = V_SCAN_LO
    while equilibrium_residual(lo, D_v, params) < 0:
        lo -= 5.0
        if lo < -200.0:
            raise RuntimeError(f"no lower bracket for equilibria at D_v={D_v}")
    return np.arange(lo, V_SCAN_HI + step / 2, step)


def vm_equilibria(D_v: float, params: NeuronalParams) -> EquilibriumSet:
    """All equilibria of the fast subsystem at sleep drive D_v.

    Dense sign scan over V_m in [-15, 5] mV (2000 subdivisions, extended
    downward if the sleep root lies below) followed by bisection of each
    bracket to |residual| < 1e-10 mV.
    """
    if not math.isfinite(D_v):
        raise ValueError("D_v must be finite")
    grid = _scan_grid(D_v, params)
    res = equilibrium_residual(grid, D_v, params)
    pos = res > 0
    roots = []
    for i in np.nonzero(pos[:-1] != pos[1:])[0]:
        v = _bisect_root(grid[i], grid[i + 1], D_v, params)
        kind = "stable" if residual_slope(v, D_v, params) < 0 else "unstable"
        roots.append((v, kind))
    roots.sort()
    n_stable = sum(1 for _, s in roots if s == "stable")
    if len(roots) == 1:
        # single equilibrium: high V_m means the subject is awake
        region = "wake" if roots[0][0] > params.V_m_th else "sleep"
    else:
        region = "bistable"
    if n_stable not in (1, 2):
        raise RuntimeError(f"unexpected stability pattern at D_v={D_v}: {roots}")
    return EquilibriumSet(D_v=D_v, roots=tuple(roots), region=region)


def _root_count(D_v: float, params: NeuronalParams) -> int:
    res = equilibrium_residual(_scan_grid(D_v, params), D_v, params)
    pos = res > 0
    return int(np.count_nonzero(pos[:-1] != pos[1:]))


@functools.lru_cache(maxsize=8)
def find_saddle_nodes(params: NeuronalParams) -> tuple[float, float]:
    """Bistable-region boundaries (D_low, D_high) via root-count bisection."""
    sweep = np.arange(0.0, 4.0 + 1e-9, 0.01)
    counts = [_root_count(d, params) for d in sweep]
    transitions = [i for i in range(len(sweep) - 1) if counts[i] != counts[i + 1]]
    if len(transitions) != 2:
        raise RuntimeError(f"expected two saddle nodes in [0, 4], found {len(transitions)}")

    def refine(i: int) -> float:
        lo, hi = sweep[i], sweep[i + 1]
        c_lo = counts[i]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _root_count(mid, params) == c_lo:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    d_low, d_high = refine(transitions[0]), refine(transitions[1])
    return d_low, d_high


def _branch_root(D_v: float, params: NeuronalParams, branch: str) -> float:
    eq = vm_equilibria(D_v, params)
    stable = eq.stable_roots
    if not stable:
        raise RuntimeError(f"no stable equilibrium at D_v={D_v}")
    if branch == "wake":
        return max(stable)
    return min(stable)


def wake_root(D_v: float, params: NeuronalParams) -> float:
    """Stable wake-branch equilibrium (largest stable root)."""
    return _branch_root(D_v, params, "wake")


def sleep_root(D_v: float, params: NeuronalParams) -> float:
    """Stable sleep-branch equilibrium (smallest stable root)."""
    return _branch_root(D_v, params, "sleep")


def _march_branch(grid: np.ndarray, params: NeuronalParams, branch: str) -> np.ndarray:
    """Roots along a branch, warm-started point to point for speed."""
    out = np.empty_like(grid)
    v = _branch_root(float(grid[0]), params, branch)
    out[0] = v
    for i in range(1, len(grid)):
        d = float(grid[i])
        # expand a small bracket around the previous root until it straddles
        half = 0.02
        for _ in range(12):
            lo, hi = v - half, v + half
            if equilibrium_residual(lo, d, params) * equilibrium_residual(hi, d, params) < 0:
                v = _bisect_root(lo, hi, d, params)
                break
            half *= 2.0
        else:
            v = _branch_root(d, params, branch)
        out[i] = v
    return out


def filter_g(D_v):
    """Smoothing kernel supported on (0, 0.2), unit integral, max at 0.04."""
    d = np.asarray(D_v, dtype=float)
    inside = (d > 0.0) & (d < 0.2)
    out = np.where(inside, 468750.0 * d * (0.2 - d) ** 4, 0.0)
    if np.isscalar(D_v):
        return float(out)
    return out


def build_forced_wake_raw(D_v, params: NeuronalParams, plateau: float = 1.04):
    """Raw forced-wake branch: wake root up to D_high, then the wake-effort
    plateau (discontinuous at D_high)."""
    _, d_high = find_saddle_nodes(params)
    d = np.atleast_1d(np.asarray(D_v, dtype=float))
    out = np.full_like(d, plateau)
    below = d <= d_high
    if np.any(below):
        out[below] = _march_branch(d[below], params, "wake")
    if np.isscalar(D_v):
        return float(out[0])
    return out


def smooth_forced_wake(raw_branch, kernel, lo: float, hi: float, grid_step: float = 1e-3):
    """Convolve a raw branch with the kernel on a uniform grid.

    The kernel trails: the smoothed value at D depends on the raw branch over
    [D - 0.2, D], so the output equals the raw wake branch for D <= D_high and
    reaches the plateau exactly at D_high + 0.2. Returns (grid, values) plus a
    linear interpolator closure.
    """
    pad = 0.2
    grid = np.arange(lo - pad, hi + grid_step / 2, grid_step)
    raw = raw_branch(grid)
    support = np.arange(0.0, pad + grid_step / 2, grid_step)
    weights = kernel(support)
    weights = weights / np.trapezoid(weights, dx=grid_step)
    smoothed = np.empty(len(grid) - len(support) + 1)
    # direct trailing convolution: value at grid[i + m] averages raw[i : i+m+1]
    m = len(support) - 1
    rev = weights[::-1]
    for j in range(len(smoothed)):
        smoothed[j] = np.trapezoid(raw[j : j + m + 1] * rev, dx=grid_step)
    out_grid = grid[m:]

    def smoothed_fn(D_v):
        return np.interp(D_v, out_grid, smoothed)

    return out_grid, smoothed, smoothed_fn


def _polyval(coeffs, x):
    """Horner evaluation with ascending-order coefficients."""
    if isinstance(x, float):  # scalar fast path, the integrator's hot loop
        out = 0.0
        for c in reversed(coeffs):
            out = out * x + c
        return out
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


@functools.lru_cache(maxsize=None)
def _polyder(coeffs):
    return tuple(i * c for i, c in enumerate(coeffs))[1:]


def eval_V1(D_v, coeffs: BranchCoefficients):
    """Sleep branch: -amp*tanh(rate*(D_v-center)) + quintic."""
    if isinstance(D_v, float):
        return -coeffs.sigmoid_amp * math.tanh(
            coeffs.sigmoid_rate * (D_v - coeffs.sigmoid_center)
        ) + _polyval(coeffs.a, D_v)
    d = np.asarray(D_v, dtype=float)
    val = -coeffs.sigmoid_amp * np.tanh(
        coeffs.sigmoid_rate * (d - coeffs.sigmoid_center)
    ) + _polyval(coeffs.a, d)
    return float(val) if np.isscalar(D_v) else val


def deriv_V1(D_v, coeffs: BranchCoefficients):
    if isinstance(D_v, float):
        z = coeffs.sigmoid_rate * (D_v - coeffs.sigmoid_center)
        return (-coeffs.sigmoid_amp * coeffs.sigmoid_rate / math.cosh(z) ** 2
                + _polyval(_polyder(coeffs.a), D_v))
    d = np.asarray(D_v, dtype=float)
    z = coeffs.sigmoid_rate * (d - coeffs.sigmoid_center)
    val = -coeffs.sigmoid_amp * coeffs.sigmoid_rate / np.cosh(z) ** 2 + _polyval(
        _polyder(coeffs.a), d
    )
    return float(val) if np.isscalar(D_v) else val


def eval_V2(D_v, coeffs: BranchCoefficients):
    """Forced-wake branch: quintic / degree-11 transition / plateau."""
    if isinstance(D_v, float):
        if D_v <= coeffs.bistable_high:
            return _polyval(coeffs.b, D_v)
        if D_v <= coeffs.transition_end:
            return _polyval(coeffs.c, D_v)
        return coeffs.plateau
    d = np.asarray(D_v, dtype=float)
    out = np.where(
        d <= coeffs.bistable_high,
        _polyval(coeffs.b, d),
        np.where(d <= coeffs.transition_end, _polyval(coeffs.c, d), coeffs.plateau),
    )
    return float(out) if np.isscalar(D_v) else out


def deriv_V2(D_v, coeffs: BranchCoefficients):
    if isinstance(D_v, float):
        if D_v <= coeffs.bistable_high:
            return _polyval(_polyder(coeffs.b), D_v)
        if D_v <= coeffs.transition_end:
            return _polyval(_polyder(coeffs.c), D_v)
        return 0.0
    d = np.asarray(D_v, dtype=float)
    out = np.where(
        d <= coeffs.bistable_high,
        _polyval(_polyder(coeffs.b), d),
        np.where(d <= coeffs.transition_end, _polyval(_polyder(coeffs.c), d), 0.0),
    )
    return float(out) if np.isscalar(D_v) else out


def fit_branches(
    params: NeuronalParams,
    sleep_domain: tuple[float, float] = (1.45, 3.5),
    wake_domain: tuple[float, float] = (0.0, 2.46),
    reference: BranchCoefficients = BranchCoefficients(),
) -> BranchCoefficients:
    """Refit the branch polynomials from brute-force roots.

    Provided for reproducibility; runtime evaluation keeps the default
    coefficients, which are the ground truth for downstream numbers.
    Protocol: sleep quintic fits root-minus-sigmoid on a 1e-3 grid; the
    forced-wake branch is convolved with the kernel, then the quintic fits
    the smoothed curve over wake_domain (1e-3 grid) and the degree-11
    transition piece fits (2.46, 2.66] on a 1e-4 grid. Coefficient vectors
    are grid-sensitive even when the refit curve matches to hundredths of a
    mV, because nearby quintics on these domains are nearly degenerate; judge
    a refit by curve error, not coefficient error. The degree-11 fit is
    ill-conditioned by construction (narrow domain, high degree); a
    condition-number warning is emitted, not an error.
    """
    d_low, _d_high = find_saddle_nodes(params)
    lo_break = reference.bistable_high
    hi_break = reference.transition_end

    sleep_grid = np.arange(max(sleep_domain[0], d_low), sleep_domain[1], 1e-3)
    sleep_vals = _march_branch(sleep_grid, params, "sleep")
    sigmoid = -reference.sigmoid_amp * np.tanh(
        reference.sigmoid_rate * (sleep_grid - reference.sigmoid_center)
    )
    a = np.polynomial.polynomial.polyfit(sleep_grid, sleep_vals - sigmoid, 5)

    raw = lambda d: build_forced_wake_raw(d, params, plateau=reference.plateau)
    grid_b, smooth_b, _ = smooth_forced_wake(
        raw, filter_g, wake_domain[0], lo_break, grid_step=1e-3
    )
    mask_b = (grid_b >= wake_domain[0]) & (grid_b <= lo_break)
    b = np.polynomial.polynomial.polyfit(grid_b[mask_b], smooth_b[mask_b], 5)

    grid_c, smooth_c, _ = smooth_forced_wake(
        raw, filter_g, lo_break - 0.05, hi_break + 0.05, grid_step=1e-4
    )
    mask_c = (grid_c > lo_break) & (grid_c <= hi_break)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", np.exceptions.RankWarning)
        c = np.polynomial.polynomial.polyfit(grid_c[mask_c], smooth_c[mask_c], 11)
    cond = np.linalg.cond(np.vander(grid_c[mask_c], 12))
    if cond > 1e12:
        warnings.warn(
            f"degree-11 transition fit is ill-conditioned (cond {cond:.2e})",
            RuntimeWarning,
            stacklevel=2,
        )
    return BranchCoefficients(
        a=tuple(float(v) for v in a),
        b=tuple(float(v) for v in b),
        c=tuple(float(v) for v in c),
        sigmoid_amp=reference.sigmoid_amp,
        sigmoid_rate=reference.sigmoid_rate,
        sigmoid_center=reference.sigmoid_center,
        plateau=reference.plateau,
        bistable_low=reference.bistable_low,
        bistable_high=reference.bistable_high,
        transition_end=reference.transition_end,
    )


def dump_branch_curves(
    path: str,
    params: ModelParams,
    lo: float = 0.0,
    hi: float = 3.5,
    step: float = 1e-3,
) -> None:
    """CSV of raw and fitted branches for the plotting component."""
    np_ = params.neuronal
    coeffs = params.branches
    d_low, d_high = find_saddle_nodes(np_)
    grid = np.arange(lo, hi + step / 2, step)
    raw = lambda d: build_forced_wake_raw(d, np_, plateau=coeffs.plateau)
    _g, _s, smooth_fn = smooth_forced_wake(raw, filter_g, lo, hi, grid_step=step)

    sleep_vals = np.full_like(grid, np.nan)
    sleep_mask = grid >= d_low
    sleep_vals[sleep_mask] = _march_branch(grid[sleep_mask], np_, "sleep")
    wake_raw = raw(grid)
    wake_smooth = smooth_fn(grid)
    v1 = eval_V1(grid, coeffs)
    v2 = eval_V2(grid, coeffs)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["D_v", "V_sleep", "V_wake_raw", "V_wake_smoothed", "V1_fit", "V2_fit"])
        for row in zip(grid, sleep_vals, wake_raw, wake_smooth, v1, v2):
            writer.writerow([repr(float(v)) for v in row])
