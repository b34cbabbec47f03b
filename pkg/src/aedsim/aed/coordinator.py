"""KPI monitoring and the deployment/fallback mode machine.

Modes and transitions (det = windowed detection, obs = the epoch's observed
accuracy, w = kpi_window):

    NORMAL      --[det or obs < t_min]------------------> UNDER_ATTACK
                  (freeze pool, deploy best pool policy, reset budget)
    NORMAL      --[otherwise]---------------------------> NORMAL
                  (promote the shadow candidate once it has a full window
                   whose mean is >= the deployed window mean)
    UNDER_ATTACK --[obs >= t_min for w in-episode epochs]-> NORMAL
                  (unfreeze; baseline <- deployed if its validated fitness
                   is >= the baseline's)
    UNDER_ATTACK --[obs < t_min and refine budget gone]--> FALLBACK
                  (deployed <- baseline)
    UNDER_ATTACK --[otherwise]--------------------------> UNDER_ATTACK
    FALLBACK    --[obs >= t_min for w in-episode epochs]-> NORMAL
    FALLBACK    --[otherwise]---------------------------> FALLBACK

Detection compares the latest window against the first completed window of
NORMAL-mode records: a mean accuracy drop beyond t_detect_drop, or a
detector flag rate above three times its baseline mean, trips it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..defenses import DefensePolicy
from ..errors import ConfigurationError
from ..records import MODE_FALLBACK, MODE_NORMAL, MODE_UNDER_ATTACK, KpiRecord
from .search import PolicyPool


@dataclass(frozen=True)
class Thresholds:
    t_min: float = 0.55  # minimum acceptable accuracy (the lower bound)
    t_detect_drop: float = 0.15  # KPI drop that signals an attack
    kpi_window: int = 5  # epochs per KPI window

    def validate(self) -> None:
        if not 0.0 < self.t_min < 1.0:
            raise ConfigurationError("t_min", f"must be in (0, 1), got {self.t_min}")
        if not 0.0 < self.t_detect_drop < 1.0:
            raise ConfigurationError(
                "t_detect_drop", f"must be in (0, 1), got {self.t_detect_drop}"
            )
        if self.kpi_window < 1:
            raise ConfigurationError(
                "kpi_window", f"must be >= 1, got {self.kpi_window}"
            )


@dataclass
class CoordinatorState:
    mode: str
    deployed: DefensePolicy
    deployed_fitness: float
    baseline: DefensePolicy
    baseline_fitness: float
    kpi_history: list[KpiRecord] = field(default_factory=list)
    shadow: DefensePolicy | None = None
    shadow_fitness: float = 0.0
    shadow_obs: list[float] = field(default_factory=list)
    epochs_in_mode: int = 0
    emergency_budget_left: int = 0


def detect_attack(kpi_history: list[KpiRecord], thresholds: Thresholds) -> bool:
    """Windowed anomaly test against the first NORMAL-mode baseline window.

    Returns False until both a baseline window and a full latest window
    exist (warm-up contract).
    """
    if not kpi_history:
        raise ValueError("kpi_history must be nonempty")
    w = thresholds.kpi_window
    if len(kpi_history) < w:
        return False
    normal = [r for r in kpi_history if r.mode == MODE_NORMAL]
    if len(normal) < w:
        return False
    base = normal[:w]
    recent = kpi_history[-w:]

    base_acc = float(np.mean([r.observed() for r in base]))
    recent_acc = float(np.mean([r.observed() for r in recent]))
    if recent_acc < base_acc - thresholds.t_detect_drop:
        return True

    base_flags = [r.detector_flag_rate for r in base if r.detector_flag_rate is not None]
    recent_flags = [r.detector_flag_rate for r in recent if r.detector_flag_rate is not None]
    if base_flags and recent_flags:
        return float(np.mean(recent_flags)) > 3.0 * float(np.mean(base_flags))
    return False


def _sustained_recovery(
    state: CoordinatorState, provisional: list[KpiRecord], t_min: float, w: int
) -> bool:
    """obs >= t_min for a full window, entirely inside the current episode."""
    if state.epochs_in_mode + 1 < w or len(provisional) < w:
        return False
    return all(r.observed() >= t_min for r in provisional[-w:])


def co_step(
    state: CoordinatorState,
    kpi: KpiRecord,
    thresholds: Thresholds,
    pool: PolicyPool,
    emergency_budget: int = 5,
) -> CoordinatorState:
    """Apply one epoch's KPI record to the mode machine (see module doc).

    Mutates and returns ``state``; the record is appended to kpi_history
    stamped with the post-transition mode.
    """
    if state.baseline is None:
        raise RuntimeError("coordinator state has no validated baseline")
    w = thresholds.kpi_window
    obs = kpi.observed()
    provisional = state.kpi_history + [kpi]
    new_mode = state.mode

    if state.mode == MODE_NORMAL:
        detected = detect_attack(provisional, thresholds)
        if detected or obs < thresholds.t_min:
            new_mode = MODE_UNDER_ATTACK
            best = pool.best()
            if best is not None:
                state.deployed = best.policy
                state.deployed_fitness = best.fitness
            else:
                state.deployed = state.baseline
                state.deployed_fitness = state.baseline_fitness
            state.shadow = None
            state.shadow_obs = []
            state.emergency_budget_left = emergency_budget
            pool.frozen = True
        elif state.shadow is not None and len(state.shadow_obs) >= w and len(provisional) >= w:
            shadow_mean = float(np.mean(state.shadow_obs[-w:]))
            deployed_mean = float(np.mean([r.observed() for r in provisional[-w:]]))
            if shadow_mean >= deployed_mean:
                state.deployed = state.shadow
                state.deployed_fitness = state.shadow_fitness
            state.shadow = None
            state.shadow_obs = []

    elif state.mode == MODE_UNDER_ATTACK:
        if _sustained_recovery(state, provisional, thresholds.t_min, w):
            new_mode = MODE_NORMAL
            pool.frozen = False
            if state.deployed_fitness >= state.baseline_fitness:
                state.baseline = state.deployed
                state.baseline_fitness = state.deployed_fitness
        elif obs < thresholds.t_min and state.emergency_budget_left <= 0:
            new_mode = MODE_FALLBACK
            state.deployed = state.baseline
            state.deployed_fitness = state.baseline_fitness

    elif state.mode == MODE_FALLBACK:
        if _sustained_recovery(state, provisional, thresholds.t_min, w):
            new_mode = MODE_NORMAL
            pool.frozen = False

    else:
        raise ValueError(f"unknown coordinator mode {state.mode!r}")

    state.epochs_in_mode = state.epochs_in_mode + 1 if new_mode == state.mode else 1
    state.mode = new_mode
    state.kpi_history.append(replace(kpi, mode=new_mode))
    return state
