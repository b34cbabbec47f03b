"""Red-team arsenal: white-box input attacks, replay, poisoning, escalation.

FGSM/PGD operate on z-score-normalized feature vectors, so ``eps`` is an
L-infinity budget in units of per-dimension feature std. The evolving
attacker escalates its budget whenever the observed accuracy stays above its
target, one additive step at a time, clamped to its physical caps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .channel import ChannelTrace, Dataset
from .errors import ConfigurationError
from .predictor import PredictorModel, input_grad

ATTACK_KINDS = ("FGSM", "PGD", "REPLAY", "LABEL_FLIP", "NONE")
GRADIENT_KINDS = ("FGSM", "PGD")


@dataclass(frozen=True)
class AttackStrategy:
    kind: str = "NONE"
    eps: float = 0.0  # L-inf budget on normalized features
    alpha: float = 0.01  # PGD step size
    steps: int = 0  # PGD iterations
    delay: int = 0  # replay staleness in time steps
    flip_fraction: float = 0.0
    random_start: bool = False

    def validate(self, eps_cap: float | None = None) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError("kind", f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ConfigurationError("eps", f"must be >= 0, got {self.eps}")
        if eps_cap is not None and self.eps > eps_cap:
            raise ConfigurationError("eps", f"{self.eps} exceeds eps_cap {eps_cap}")
        if self.kind == "PGD":
            if self.alpha <= 0:
                raise ConfigurationError("alpha", f"must be > 0, got {self.alpha}")
            if self.alpha > self.eps:
                raise ConfigurationError(
                    "alpha", f"{self.alpha} exceeds eps {self.eps} for PGD"
                )
            if self.steps < 0:
                raise ConfigurationError("steps", f"must be >= 0, got {self.steps}")
        if self.kind == "REPLAY" and self.delay < 0:
            raise ConfigurationError("delay", f"must be >= 0, got {self.delay}")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ConfigurationError(
                "flip_fraction", f"must be in [0, 1], got {self.flip_fraction}"
            )


@dataclass(frozen=True)
class AttackerState:
    """An adversary's current strategy plus its adaptation bookkeeping.

    ``phase`` counts actual escalations (a change to eps or steps), so the
    intervals between phase increments are the attack phases of the run.
    ``loss_history`` records every (observation index, observed accuracy).
    """

    strategy: AttackStrategy
    target_accuracy: float = 0.30
    escalation_step: float = 0.01
    phase: int = 0
    loss_history: tuple[tuple[int, float], ...] = ()
    eps_cap: float = 0.1
    steps_cap: int = 10


def fgsm(model: PredictorModel, x: np.ndarray, label, eps: float) -> np.ndarray:
    """x + eps * sign(grad); sign(0) contributes nothing."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    grad = input_grad(model, x, label)
    return np.asarray(x, dtype=float) + eps * np.sign(grad)


def pgd(
    model: PredictorModel,
    x: np.ndarray,
    label,
    strategy: AttackStrategy,
    rng: np.random.Generator,
) -> np.ndarray:
    """Iterated sign-gradient steps projected back into the eps-ball of x."""
    if strategy.kind != "PGD":
        raise ConfigurationError("kind", f"pgd requires kind PGD, got {strategy.kind!r}")
    strategy.validate()
    x0 = np.asarray(x, dtype=float)
    adv = x0.copy()
    if strategy.random_start:
        adv = adv + rng.uniform(-strategy.eps, strategy.eps, size=adv.shape)
    for _ in range(strategy.steps):
        grad = input_grad(model, adv, label)
        adv = adv + strategy.alpha * np.sign(grad)
        adv = np.clip(adv, x0 - strategy.eps, x0 + strategy.eps)
    return adv


def replay(trace: ChannelTrace, delay: int) -> ChannelTrace:
    """Trace whose row t is the original row max(0, t - delay)."""
    t_len = trace.trace_len
    if not 0 <= delay < t_len:
        raise ValueError(f"delay must be in [0, trace_len), got {delay}")
    src = np.maximum(np.arange(t_len) - delay, 0)
    return ChannelTrace(gains=trace.gains[src], mags=trace.mags[src], seed=trace.seed)


def label_flip(
    dataset: Dataset, flip_fraction: float, n_ports: int, rng: np.random.Generator
) -> Dataset:
    """Poison exactly round(flip_fraction * M) labels with different ports."""
    if not 0.0 <= flip_fraction <= 1.0:
        raise ValueError(f"flip_fraction must be in [0, 1], got {flip_fraction}")
    m = len(dataset)
    n_flip = round(flip_fraction * m)
    labels = dataset.labels.copy()
    idx = rng.choice(m, size=n_flip, replace=False)
    for i in idx:
        # uniform over the n_ports - 1 other ports
        offset = rng.integers(1, n_ports)
        labels[i] = (labels[i] + offset) % n_ports
    return Dataset(features=dataset.features, labels=labels)


def perturb_features(
    strategy: AttackStrategy,
    model: PredictorModel,
    features: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Apply an on-the-fly inference attack to a feature batch.

    REPLAY shifts feature rows by the delay (the dataset-level analog of
    retransmitting stale channel samples); LABEL_FLIP and NONE leave
    inference inputs untouched (poisoning acts at training time).
    """
    if strategy.kind == "FGSM":
        return fgsm(model, features, labels, strategy.eps)
    if strategy.kind == "PGD":
        return pgd(model, features, labels, strategy, rng)
    if strategy.kind == "REPLAY":
        src = np.maximum(np.arange(features.shape[0]) - strategy.delay, 0)
        return features[src]
    return features


def evolve_attacker(state: AttackerState, observed_attacked_accuracy: float) -> AttackerState:
    """Threshold-triggered additive escalation with caps.

    If the observed accuracy is still above the attacker's target, grow eps
    by escalation_step and steps by one (both clamped). The phase counter
    advances only when eps or steps actually changed. Non-gradient kinds
    have no budget to escalate and only accrue history.
    """
    if not 0.0 <= observed_attacked_accuracy <= 1.0:
        raise ValueError(f"observation must be in [0, 1], got {observed_attacked_accuracy}")
    history = state.loss_history + ((len(state.loss_history), float(observed_attacked_accuracy)),)
    strategy = state.strategy
    phase = state.phase
    if strategy.kind in GRADIENT_KINDS and observed_attacked_accuracy > state.target_accuracy:
        new_eps = min(strategy.eps + state.escalation_step, state.eps_cap)
        new_steps = min(strategy.steps + 1, state.steps_cap) if strategy.kind == "PGD" else strategy.steps
        if new_eps != strategy.eps or new_steps != strategy.steps:
            strategy = replace(strategy, eps=new_eps, steps=new_steps)
            phase += 1
    return replace(state, strategy=strategy, phase=phase, loss_history=history)
