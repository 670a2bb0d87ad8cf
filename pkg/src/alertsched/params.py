"""Parameter bundles for the circadian, three-process, and neuronal models.

All bundles are frozen dataclasses whose defaults are the published table
values. Time is measured in hours throughout; the neuronal time constants
tau_m and tau_v are stored in hours (1/360 h) so that every right-hand side
evaluates in per-hour units.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


@dataclass(frozen=True)
class CircadianParams:
    """Light-driven pacemaker (x, x_c) and photoreceptor (n) constants."""

    mu: float = 0.13          # 1/h, oscillator stiffness
    k_c: float = 0.4          # h, x_c correction inside the light coupling
    q: float = 1.0 / 3.0      # dimensionless, x_c drive shape
    tau_x: float = 24.2       # h, intrinsic circadian period
    k: float = 0.55           # 1/h, light coupling into x_c
    G: float = 33.75          # dimensionless photic gain
    alpha_0: float = 0.05     # 1/h, photoreceptor activation rate at I_0
    p: float = 0.5            # dimensionless intensity exponent
    I_0: float = 9500.0       # lux, reference illuminance
    gamma: float = 0.0075     # 1/h, photoreceptor recovery rate

    def __post_init__(self) -> None:
        for name in ("mu", "k_c", "tau_x", "k", "G", "alpha_0", "p", "I_0", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")


@dataclass(frozen=True)
class ThreeProcessParams:
    """Process S/W constants and the sleep-propensity thresholds."""

    tau_d: float = 4.2        # h, homeostatic discharge during sleep
    tau_r: float = 18.2       # h, homeostatic recovery while awake
    tau_W: float = 0.662      # h, sleep-inertia decay while awake
    A_c: float = 0.1333       # circadian weight in the sleep propensity
    H_m: float = 0.67         # propensity threshold for falling asleep
    L_m: float = 0.17         # propensity threshold for waking

    def __post_init__(self) -> None:
        if not 0 < self.L_m < self.H_m < 1:
            raise ValueError("thresholds must satisfy 0 < L_m < H_m < 1")


@dataclass(frozen=True)
class NeuronalParams:
    """MA/VLPO mutual-inhibition constants and the PR homeostat."""

    tau_m: float = 1.0 / 360.0  # h, MA potential time constant
    tau_v: float = 1.0 / 360.0  # h, VLPO potential time constant
    v_mv: float = 1.8           # mV s, VLPO -> MA inhibition weight
    v_vm: float = 2.1           # mV s, MA -> VLPO inhibition weight
    v_vc: float = 3.37          # mV s, circadian drive weight
    v_vh: float = 1.01          # mV/nM, homeostatic drive weight
    A_m: float = 1.3            # mV, MA background drive
    A_v: float = -10.2          # mV, VLPO background drive
    Q_max: float = 100.0        # 1/s, firing-rate ceiling
    theta: float = 10.0         # mV, sigmoid midpoint
    sigma: float = 3.0          # mV, sigmoid width
    c_x: float = 0.8            # circadian drive weight on x
    c_xc: float = -0.16         # circadian drive weight on x_c
    chi: float = 45.0           # h, homeostat time constant
    mu_H: float = 4.2           # nM s, homeostat production gain
    V_m_th: float = -3.785      # mV, awake iff V_m above this
    V_m_forced: float = 1.04    # mV, wake-effort clamp value


@dataclass(frozen=True)
class BranchCoefficients:
    """Published fits for the sleep branch V1 and forced-wake branch V2.

    V1(D_v) = -sigmoid_amp * tanh(sigmoid_rate * (D_v - sigmoid_center))
              + sum a_i D_v^i
    V2(D_v) = quintic b for D_v <= 2.46, degree-11 c on (2.46, 2.66],
              plateau beyond.
    """

    a: tuple[float, ...] = (-3.2369, -3.9232, 9.2384, -7.3438, 2.0482, -0.1964)
    b: tuple[float, ...] = (1.1236, -0.3960, 0.8783, -1.0640, 0.5328, -0.0982)
    # The transition-band coefficients were republished rounded to five
    # significant figures, which a degree-11 polynomial with O(1e7) terms
    # cannot survive (the rounding alone shifts values by hundreds of mV).
    # These are a full-precision refit of the same construction: convolve the
    # forced-wake branch with the smoothing kernel, least squares on a 1e-4
    # grid over (2.46, 2.66]. Continuity with the quintic at 2.46 is 1.3e-3
    # mV and with the plateau at 2.66 is 2.0e-5 mV.
    c: tuple[float, ...] = (
        1425766.9276022045,
        -1523014.3947708209,
        193817.6055178467,
        182625.30092932057,
        13353.094193152025,
        -21081.122659211615,
        -8426.372811079684,
        534.6543242629444,
        1515.5499898224557,
        266.8240118869966,
        -275.7823422193717,
        37.10058630745665,
    )
    sigmoid_amp: float = 3.5702   # mV
    sigmoid_rate: float = 40.0    # 1/mV
    sigmoid_center: float = 1.45  # mV
    plateau: float = 1.04         # mV
    bistable_low: float = 1.45    # mV, wake branch ends below this D_v
    bistable_high: float = 2.46   # mV, sleep branch ends above this D_v
    transition_end: float = 2.66  # mV, smoothing band is (2.46, 2.66]

    def __post_init__(self) -> None:
        if len(self.a) != 6 or len(self.b) != 6 or len(self.c) != 12:
            raise ValueError("branch polynomials must have 6, 6, and 12 coefficients")


@dataclass(frozen=True)
class ModelParams:
    """Everything needed to evaluate any of the three models."""

    circadian: CircadianParams = CircadianParams()
    three_process: ThreeProcessParams = ThreeProcessParams()
    neuronal: NeuronalParams = NeuronalParams()
    branches: BranchCoefficients = BranchCoefficients()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        raw = json.loads(text)
        kwargs = {}
        for field, sub_cls in (
            ("circadian", CircadianParams),
            ("three_process", ThreeProcessParams),
            ("neuronal", NeuronalParams),
            ("branches", BranchCoefficients),
        ):
            if field in raw:
                sub_raw = dict(raw[field])
                for key, value in sub_raw.items():
                    if isinstance(value, list):
                        sub_raw[key] = tuple(value)
                kwargs[field] = sub_cls(**sub_raw)
        return cls(**kwargs)


DEFAULT_PARAMS = ModelParams()
