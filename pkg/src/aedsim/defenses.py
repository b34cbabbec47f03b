"""Defense-policy space: sanitization, smoothed voting, adversarial training.

A DefensePolicy is one point in a 6-knob space. The inference pipeline is
fixed: anomaly check and clamp (detect_z), then quantization (quant_bits),
then a majority vote over Gaussian-noised copies (smooth_sigma, votes). The
training-side knob pair (adv_ratio, pgd_train_steps) controls how much of
each minibatch is replaced by PGD examples before the gradient step.

The all-off policy (adv_ratio 0, sigma 0, quant 0, detect_z inf) reduces
every operation here to the exact undefended path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attacks import AttackStrategy, perturb_features, pgd
from .channel import Dataset
from .errors import ConfigurationError
from .predictor import PredictorModel, TrainConfig, forward, loss_and_grad

QUANT_RANGE = 3.0  # quantizer clamp range on normalized features: [-3, 3]
STD_FLOOR = 1e-9


@dataclass(frozen=True)
class DefensePolicy:
    id: str
    adv_ratio: float = 0.0  # fraction of each minibatch replaced by PGD samples
    smooth_sigma: float = 0.0  # inference-time Gaussian noise std
    votes: int = 1  # smoothing ensemble size
    quant_bits: int = 0  # 0 = off; else 2**bits levels over [-3, 3]
    detect_z: float = math.inf  # anomaly z-score threshold
    pgd_train_steps: int = 0
    parent_id: str | None = None  # lineage for mutated/refined policies

    def validate(self) -> None:
        if not 0.0 <= self.adv_ratio <= 1.0:
            raise ConfigurationError("adv_ratio", f"must be in [0, 1], got {self.adv_ratio}")
        if self.smooth_sigma < 0:
            raise ConfigurationError("smooth_sigma", f"must be >= 0, got {self.smooth_sigma}")
        if self.votes < 1:
            raise ConfigurationError("votes", f"must be >= 1, got {self.votes}")
        if self.quant_bits not in range(9):
            raise ConfigurationError("quant_bits", f"must be in 0..8, got {self.quant_bits}")
        if not self.detect_z > 0:
            raise ConfigurationError("detect_z", f"must be > 0, got {self.detect_z}")
        if self.pgd_train_steps < 0:
            raise ConfigurationError(
                "pgd_train_steps", f"must be >= 0, got {self.pgd_train_steps}"
            )

    def knobs(self) -> dict:
        return {
            "adv_ratio": self.adv_ratio,
            "smooth_sigma": self.smooth_sigma,
            "votes": self.votes,
            "quant_bits": self.quant_bits,
            "detect_z": self.detect_z,
            "pgd_train_steps": self.pgd_train_steps,
        }


def identity_policy(policy_id: str = "p0000") -> DefensePolicy:
    """The all-off policy; every defense op reduces to the undefended path."""
    return DefensePolicy(id=policy_id)


@dataclass(frozen=True)
class FeatureStats:
    """Running per-dimension mean/std over trusted clean samples (Welford)."""

    mean: np.ndarray
    m2: np.ndarray  # sum of squared deviations
    count: int = 0

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.full_like(self.mean, STD_FLOOR)
        return np.maximum(np.sqrt(self.m2 / (self.count - 1)), STD_FLOOR)

    @classmethod
    def empty(cls, dim: int) -> "FeatureStats":
        return cls(mean=np.zeros(dim), m2=np.zeros(dim), count=0)

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "FeatureStats":
        """Warm up from a trusted clean batch in one shot."""
        samples = np.atleast_2d(samples)
        mean = samples.mean(axis=0)
        m2 = ((samples - mean) ** 2).sum(axis=0)
        return cls(mean=mean, m2=m2, count=samples.shape[0])


def update_stats(stats: FeatureStats, x: np.ndarray) -> FeatureStats:
    """Fold one sample into the running mean/std (numerically stable)."""
    x = np.asarray(x, dtype=float)
    count = stats.count + 1
    delta = x - stats.mean
    mean = stats.mean + delta / count
    m2 = stats.m2 + delta * (x - mean)
    return FeatureStats(mean=mean, m2=m2, count=count)


def quantize(x: np.ndarray, bits: int) -> np.ndarray:
    """Midpoint quantizer with 2**bits cells over [-QUANT_RANGE, QUANT_RANGE]."""
    levels = 2**bits
    width = 2.0 * QUANT_RANGE / levels
    clamped = np.clip(x, -QUANT_RANGE, QUANT_RANGE)
    cell = np.minimum(np.floor((clamped + QUANT_RANGE) / width), levels - 1)
    return -QUANT_RANGE + (cell + 0.5) * width


def sanitize_input(
    policy: DefensePolicy,
    x: np.ndarray,
    stats: FeatureStats,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray | bool]:
    """Anomaly-check, clamp, and quantize one sample or a batch.

    A sample is flagged iff its max per-dimension |z-score| exceeds
    policy.detect_z; flagged samples are clamped to mean +/- detect_z * std.
    Quantization applies afterwards when quant_bits > 0. Deterministic;
    ``rng`` is accepted for interface symmetry but unused (noise belongs to
    smoothed_predict).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    flags = np.zeros(batch.shape[0], dtype=bool)

    if math.isfinite(policy.detect_z):
        if stats.count < 1:
            raise ValueError("FeatureStats must be warmed up when detect_z is finite")
        z = (batch - stats.mean) / stats.std
        flags = np.abs(z).max(axis=1) > policy.detect_z
        if flags.any():
            lo = stats.mean - policy.detect_z * stats.std
            hi = stats.mean + policy.detect_z * stats.std
            batch = np.where(flags[:, None], np.clip(batch, lo, hi), batch)

    if policy.quant_bits > 0:
        batch = quantize(batch, policy.quant_bits)

    if single:
        return batch[0], bool(flags[0])
    return batch, flags


def smoothed_predict(
    policy: DefensePolicy,
    model: PredictorModel,
    x: np.ndarray,
    rng: np.random.Generator,
) -> int | np.ndarray:
    """Majority port over ``votes`` noisy forward passes (ties: lowest index).

    smooth_sigma 0 collapses to a single clean prediction.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x

    if policy.smooth_sigma == 0.0:
        preds = np.argmax(forward(model, batch), axis=1)
        return int(preds[0]) if single else preds

    counts = np.zeros((batch.shape[0], model.n_outputs), dtype=np.int64)
    for _ in range(policy.votes):
        noisy = batch + rng.normal(0.0, policy.smooth_sigma, size=batch.shape)
        votes = np.argmax(forward(model, noisy), axis=1)
        counts[np.arange(batch.shape[0]), votes] += 1
    preds = np.argmax(counts, axis=1)  # argmax takes the lowest index on ties
    return int(preds[0]) if single else preds


def adv_train_epoch(
    model: PredictorModel,
    dataset: Dataset,
    policy: DefensePolicy,
    attacker_strategy: AttackStrategy,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    on_perturb=None,
) -> tuple[PredictorModel, float]:
    """sgd_epoch, except a leading slice of each minibatch is PGD-perturbed.

    The slice holds round(adv_ratio * len(minibatch)) samples, attacked with
    the strategy's eps/alpha and policy.pgd_train_steps iterations against
    the current model before the gradient step. ``on_perturb`` (tests) is
    called with the perturbed count per minibatch.
    """
    policy.validate()
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    model = model.copy()
    train_attack = None
    if policy.adv_ratio > 0.0 and attacker_strategy.eps > 0.0 and policy.pgd_train_steps > 0:
        train_attack = AttackStrategy(
            kind="PGD",
            eps=attacker_strategy.eps,
            alpha=min(attacker_strategy.alpha, attacker_strategy.eps),
            steps=policy.pgd_train_steps,
            random_start=attacker_strategy.random_start,
        )
    order = rng.permutation(len(dataset))
    total, count = 0.0, 0
    for start in range(0, len(order), train_cfg.batch_size):
        sel = order[start : start + train_cfg.batch_size]
        feats = dataset.features[sel]
        labels = dataset.labels[sel]
        n_adv = round(policy.adv_ratio * len(sel)) if train_attack is not None else 0
        if on_perturb is not None:
            on_perturb(n_adv)
        if n_adv > 0:
            feats = feats.copy()
            feats[:n_adv] = pgd(model, feats[:n_adv], labels[:n_adv], train_attack, rng)
        loss, grads = loss_and_grad(model, feats, labels)
        for w, gw in zip(model.weights, grads.weights):
            w -= train_cfg.learning_rate * gw
        for b, gb in zip(model.biases, grads.biases):
            b -= train_cfg.learning_rate * gb
        total += loss * len(sel)
        count += len(sel)
    return model, total / count


@dataclass(frozen=True)
class DefendedEval:
    """Outcome of one defended evaluation pass."""

    accuracy: float
    flag_rate: float
    flagged_max_z: np.ndarray  # max |z| of each flagged sample (may be empty)


def defended_accuracy(
    policy: DefensePolicy,
    model: PredictorModel,
    dataset: Dataset,
    stats: FeatureStats,
    rng: np.random.Generator,
    attack: AttackStrategy | None = None,
    attack_rng: np.random.Generator | None = None,
) -> DefendedEval:
    """Accuracy of the policy-defended inference path over a dataset.

    Optionally perturbs the inputs with an on-the-fly attack first (the
    attacker differentiates the bare model, not the defense pipeline).
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    features = dataset.features
    if attack is not None and attack.kind != "NONE":
        features = perturb_features(
            attack, model, features, dataset.labels, attack_rng or rng
        )
    sanitized, flags = sanitize_input(policy, features, stats)
    preds = smoothed_predict(policy, model, sanitized, rng)
    accuracy = float(np.mean(preds == dataset.labels))
    flags = np.atleast_1d(flags)
    if flags.any() and math.isfinite(policy.detect_z):
        z = np.abs((features[flags] - stats.mean) / stats.std)
        flagged_max_z = z.max(axis=1)
    else:
        flagged_max_z = np.empty(0)
    return DefendedEval(
        accuracy=accuracy,
        flag_rate=float(np.mean(flags)),
        flagged_max_z=flagged_max_z,
    )
