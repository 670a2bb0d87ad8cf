"""Sleep and circadian dynamics with adjoint-based schedule optimization.

Three models of alertness under a shared circadian pacemaker: a classic
three-process regulator, a physiologically detailed mutual-inhibition model
of the sleep-wake switch, and a hybrid reduction of the latter that replaces
the stiff neuronal pair with its equilibrium branch functions. On top of the
hybrid model sit experimental-validation fits and a projected gradient
optimizer for light and sleep schedules of shift workers.
"""
from .params import (
    BranchCoefficients,
    CircadianParams,
    DEFAULT_PARAMS,
    ModelParams,
    NeuronalParams,
    ThreeProcessParams,
)
from .models import (
    ASLEEP,
    AWAKE,
    FORCED_WAKE,
    MODEL_KINDS,
    PR_FULL,
    PR_HYBRID,
    TP,
    SleepMode,
    ThresholdSet,
    alertness_pr,
    alertness_tp,
    circadian_drive_C,
    circadian_phase,
    photic_drive_u,
    q_sigmoid,
    sleep_drive_Dv,
    sleepiness_tp,
    thresholds,
)
from .bifurcation import (
    EquilibriumSet,
    eval_V1,
    eval_V2,
    filter_g,
    find_saddle_nodes,
    fit_branches,
    vm_equilibria,
)

__version__ = "0.1.0"

__all__ = [
    "ASLEEP",
    "AWAKE",
    "BranchCoefficients",
    "CircadianParams",
    "DEFAULT_PARAMS",
    "EquilibriumSet",
    "FORCED_WAKE",
    "MODEL_KINDS",
    "ModelParams",
    "NeuronalParams",
    "PR_FULL",
    "PR_HYBRID",
    "SleepMode",
    "TP",
    "ThreeProcessParams",
    "ThresholdSet",
    "alertness_pr",
    "alertness_tp",
    "circadian_drive_C",
    "circadian_phase",
    "eval_V1",
    "eval_V2",
    "filter_g",
    "find_saddle_nodes",
    "fit_branches",
    "photic_drive_u",
    "q_sigmoid",
    "sleep_drive_Dv",
    "sleepiness_tp",
    "thresholds",
    "vm_equilibria",
    "__version__",
]
