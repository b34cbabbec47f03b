"""Surrogate-ranked, twin-validated fitness evaluation of defense policies.

The surrogate is a 1-nearest-neighbor interpolator over min-max-normalized
policy vectors: trivially refittable, and exact on points it has measured,
which is what makes ranking-consistency checkable. Real validation runs the
defended inference path on the held-out twin dataset against every attack in
the arsenal (plus the clean case) and scores a policy by its worst case.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..attacks import AttackerState, evolve_attacker
from ..channel import Dataset
from ..defenses import DefensePolicy, FeatureStats, defended_accuracy
from ..predictor import PredictorModel
from .search import KNOB_ORDER, PriorBounds, policy_vector

logger = logging.getLogger(__name__)


@dataclass
class Surrogate:
    """1-NN KPI predictor over normalized policy vectors.

    Unfitted, it predicts the prior midpoint 0.5 everywhere. Distance ties
    go to the most recently added point, so re-measured policies take their
    latest value.
    """

    priors: PriorBounds
    points: np.ndarray  # (n, len(KNOB_ORDER))
    values: np.ndarray  # (n,)

    def predict(self, policy: DefensePolicy) -> float:
        if len(self.values) == 0:
            return 0.5
        v = policy_vector(policy, self.priors)
        dists = np.linalg.norm(self.points - v, axis=1)
        best = np.flatnonzero(dists == dists.min())[-1]
        return float(np.clip(self.values[best], 0.0, 1.0))


def fe_fit(
    history: list[tuple[DefensePolicy, float]], priors: PriorBounds
) -> Surrogate:
    """Fit the surrogate on (policy, measured worst-case accuracy) pairs."""
    if not history:
        return Surrogate(
            priors=priors, points=np.empty((0, len(KNOB_ORDER))), values=np.empty(0)
        )
    points = np.stack([policy_vector(p, priors) for p, _ in history])
    values = np.array([f for _, f in history], dtype=float)
    return Surrogate(priors=priors, points=points, values=values)


def fe_rank(
    surrogate: Surrogate, candidates: list[DefensePolicy], k: int
) -> list[DefensePolicy]:
    """Top-k candidates by predicted fitness, ties broken by lower id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = sorted(candidates, key=lambda p: (-surrogate.predict(p), p.id))
    return ranked[: min(k, len(ranked))]


def admissible_attacks(
    attack_set: list[AttackerState], priors: PriorBounds
) -> list[AttackerState]:
    """Drop attacks whose eps exceeds the physical budget, with a warning."""
    usable = []
    for a in attack_set:
        if a.strategy.eps > priors.eps_cap:
            logger.warning(
                "rejecting attack %s: eps %.4f exceeds physical cap %.4f",
                a.strategy.kind,
                a.strategy.eps,
                priors.eps_cap,
            )
        else:
            usable.append(a)
    return usable


def _candidate_seeds(
    candidates: list[DefensePolicy], rng: np.random.Generator
) -> dict[str, int]:
    """One child seed per candidate, assigned in id order.

    Evaluations may then run in any order (or concurrently) without changing
    a single smoothing draw.
    """
    ordered = sorted(candidates, key=lambda p: p.id)
    seeds = rng.integers(0, 2**63 - 1, size=len(ordered))
    return {p.id: int(s) for p, s in zip(ordered, seeds)}


def fe_validate(
    candidates: list[DefensePolicy],
    model: PredictorModel,
    dt_dataset: Dataset,
    attack_set: list[AttackerState],
    stats: FeatureStats,
    priors: PriorBounds,
    rng: np.random.Generator,
) -> list[tuple[DefensePolicy, float]]:
    """Worst-case defended accuracy of each candidate on the twin dataset.

    Fitness is the minimum over the clean case and every admissible attack.
    Results come back ordered by candidate id.
    """
    if len(dt_dataset) == 0:
        raise ValueError("dt_dataset must be nonempty")
    usable = admissible_attacks(attack_set, priors)
    seeds = _candidate_seeds(candidates, rng)
    results = []
    for policy in sorted(candidates, key=lambda p: p.id):
        crng = np.random.default_rng(seeds[policy.id])
        accs = [defended_accuracy(policy, model, dt_dataset, stats, crng).accuracy]
        for attack in usable:
            accs.append(
                defended_accuracy(
                    policy, model, dt_dataset, stats, crng, attack=attack.strategy
                ).accuracy
            )
        results.append((policy, min(accs)))
    return results


def fe_enhance_attacks(
    attack_set: list[AttackerState],
    qualified_policies: list[DefensePolicy],
    model: PredictorModel,
    dt_dataset: Dataset,
    stats: FeatureStats,
    rng: np.random.Generator,
) -> list[AttackerState]:
    """Escalate each attack by what the qualified defenses achieved against it.

    The observation handed to evolve_attacker is the best (highest) defended
    accuracy among the qualified policies: if even the strongest defense
    stays above the attack's target, the attack needs to grow.
    """
    if not qualified_policies:
        return list(attack_set)
    seeds = rng.integers(0, 2**63 - 1, size=len(attack_set))
    out = []
    for attack, seed in zip(attack_set, seeds):
        arng = np.random.default_rng(int(seed))
        best = max(
            defended_accuracy(
                policy, model, dt_dataset, stats, arng, attack=attack.strategy
            ).accuracy
            for policy in qualified_policies
        )
        out.append(evolve_attacker(attack, best))
    return out
