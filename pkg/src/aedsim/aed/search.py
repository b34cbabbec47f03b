"""Defense-policy search space, pool, and the evolutionary generator.

Policies live in a 6-knob box whose bounds (the feasibility priors) also
carry the attacker's physical budget caps. Generation mixes Gaussian
mutation of fitness-weighted parents with uniform crossover, topped up with
uniform prior samples for diversity; refinement is the same mutation at half
the step size. All knobs are clipped back into the priors, so every policy
ever produced satisfies the bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..defenses import DefensePolicy
from ..errors import ConfigurationError

CONTINUOUS_KNOBS = ("adv_ratio", "smooth_sigma", "detect_z")
DISCRETE_KNOBS = ("votes", "quant_bits", "pgd_train_steps")
KNOB_ORDER = ("adv_ratio", "smooth_sigma", "votes", "quant_bits", "detect_z", "pgd_train_steps")

MUTATION_STD_FRACTION = 0.10  # per-knob std as a fraction of the knob range
DISCRETE_RESAMPLE_PROB = 0.20
REFINE_SCALE = 0.5  # refinement uses half the generation mutation std


@dataclass(frozen=True)
class PriorBounds:
    """Feasible ranges per policy knob, plus the attacker's physical budget."""

    adv_ratio: tuple[float, float] = (0.0, 1.0)
    smooth_sigma: tuple[float, float] = (0.0, 0.3)
    votes: tuple[int, ...] = (1, 3, 5, 7, 9)
    quant_bits: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8)
    detect_z: tuple[float, float] = (2.5, 6.0)
    pgd_train_steps: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7)
    eps_cap: float = 0.1
    steps_cap: int = 10

    def validate(self) -> None:
        for name in CONTINUOUS_KNOBS:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(name, f"min {lo} exceeds max {hi}")
        for name in DISCRETE_KNOBS:
            allowed = getattr(self, name)
            if len(allowed) == 0:
                raise ConfigurationError(name, "allowed set must be nonempty")
        if self.eps_cap < 0:
            raise ConfigurationError("eps_cap", f"must be >= 0, got {self.eps_cap}")
        if self.steps_cap < 0:
            raise ConfigurationError("steps_cap", f"must be >= 0, got {self.steps_cap}")

    def contains(self, policy: DefensePolicy) -> bool:
        for name in CONTINUOUS_KNOBS:
            lo, hi = getattr(self, name)
            v = getattr(policy, name)
            if name == "detect_z" and math.isinf(v):
                continue  # the hand-built identity policy disables detection
            if not lo <= v <= hi:
                return False
        return all(getattr(policy, n) in getattr(self, n) for n in DISCRETE_KNOBS)


def policy_vector(policy: DefensePolicy, priors: PriorBounds) -> np.ndarray:
    """Min-max normalized knob vector in [0, 1]^6 (fixed knob order)."""
    out = []
    for name in KNOB_ORDER:
        v = getattr(policy, name)
        if name in CONTINUOUS_KNOBS:
            lo, hi = getattr(priors, name)
            if name == "detect_z" and math.isinf(v):
                v = hi
            out.append(0.5 if hi == lo else (min(max(v, lo), hi) - lo) / (hi - lo))
        else:
            allowed = getattr(priors, name)
            lo, hi = min(allowed), max(allowed)
            out.append(0.0 if hi == lo else (v - lo) / (hi - lo))
    return np.array(out)


class PolicyIdAllocator:
    """Run-local sequential policy ids (p0000, p0001, ...)."""

    def __init__(self, prefix: str = "p"):
        self.prefix = prefix
        self._next = 0

    def next(self) -> str:
        pid = f"{self.prefix}{self._next:04d}"
        self._next += 1
        return pid


@dataclass
class PoolEntry:
    policy: DefensePolicy
    fitness: float | None
    generation: int


class PolicyPool:
    """Bounded archive of (policy, measured fitness, generation) entries.

    Writes are refused while frozen (the coordinator freezes the pool in
    UNDER_ATTACK mode); ``write_count`` backs the freeze-discipline checks.
    """

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ConfigurationError("capacity", f"must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[PoolEntry] = []
        self.frozen = False
        self.write_count = 0

    def add(self, policy: DefensePolicy, fitness: float | None, generation: int) -> None:
        if self.frozen:
            raise RuntimeError("policy pool is frozen")
        self.write_count += 1
        for entry in self.entries:
            if entry.policy.id == policy.id:
                entry.fitness = fitness
                entry.generation = generation
                return
        self.entries.append(PoolEntry(policy=policy, fitness=fitness, generation=generation))
        if len(self.entries) > self.capacity:
            # evict the worst; unmeasured entries count as worst of all
            worst = max(
                self.entries,
                key=lambda e: (-(e.fitness if e.fitness is not None else -1.0), e.policy.id),
            )
            self.entries.remove(worst)

    def scored(self) -> list[PoolEntry]:
        return [e for e in self.entries if e.fitness is not None]

    def best(self) -> PoolEntry | None:
        scored = self.scored()
        if not scored:
            return None
        return sorted(scored, key=lambda e: (-e.fitness, e.policy.id))[0]

    def __len__(self) -> int:
        return len(self.entries)


def sample_uniform_policy(
    priors: PriorBounds, rng: np.random.Generator, ids: PolicyIdAllocator
) -> DefensePolicy:
    lo, hi = priors.adv_ratio
    adv_ratio = rng.uniform(lo, hi)
    lo, hi = priors.smooth_sigma
    smooth_sigma = rng.uniform(lo, hi)
    votes = int(rng.choice(priors.votes))
    quant_bits = int(rng.choice(priors.quant_bits))
    lo, hi = priors.detect_z
    detect_z = rng.uniform(lo, hi)
    pgd_train_steps = int(rng.choice(priors.pgd_train_steps))
    return DefensePolicy(
        id=ids.next(),
        adv_ratio=adv_ratio,
        smooth_sigma=smooth_sigma,
        votes=votes,
        quant_bits=quant_bits,
        detect_z=detect_z,
        pgd_train_steps=pgd_train_steps,
    )


def mutate_policy(
    parent: DefensePolicy,
    priors: PriorBounds,
    rng: np.random.Generator,
    ids: PolicyIdAllocator,
    scale: float = 1.0,
) -> DefensePolicy:
    """Gaussian step on continuous knobs, occasional re-draw of discrete ones.

    ``scale`` multiplies the base mutation std, so refinement (scale 0.5)
    consumes the same random draws and moves exactly half as far before
    clipping.
    """
    fields: dict = {}
    for name in KNOB_ORDER:
        v = getattr(parent, name)
        if name in CONTINUOUS_KNOBS:
            lo, hi = getattr(priors, name)
            if name == "detect_z" and math.isinf(v):
                v = hi
            step = rng.standard_normal() * scale * MUTATION_STD_FRACTION * (hi - lo)
            fields[name] = float(np.clip(v + step, lo, hi))
        else:
            allowed = getattr(priors, name)
            if rng.random() < DISCRETE_RESAMPLE_PROB:
                fields[name] = int(rng.choice(allowed))
            else:
                fields[name] = v
    return DefensePolicy(id=ids.next(), parent_id=parent.id, **fields)


def crossover_policy(
    pa: DefensePolicy,
    pb: DefensePolicy,
    rng: np.random.Generator,
    ids: PolicyIdAllocator,
) -> DefensePolicy:
    fields = {
        name: getattr(pa if rng.random() < 0.5 else pb, name) for name in KNOB_ORDER
    }
    return DefensePolicy(id=ids.next(), parent_id=f"{pa.id}+{pb.id}", **fields)


def _weighted_parent_index(scored: list[PoolEntry], rng: np.random.Generator) -> int:
    weights = np.array([e.fitness for e in scored], dtype=float)
    total = weights.sum()
    p = None if total <= 0 else weights / total
    return int(rng.choice(len(scored), p=p))


def pg_generate(
    pool: PolicyPool,
    priors: PriorBounds,
    rng: np.random.Generator,
    n: int,
    diversity_fraction: float,
    ids: PolicyIdAllocator,
) -> list[DefensePolicy]:
    """Produce ``n`` fresh candidates.

    With at least two scored pool entries, round((1 - diversity_fraction)*n)
    candidates come from the pool, alternating mutation of a fitness-weighted
    parent with uniform crossover of two distinct parents; the remainder (and
    everything, on a cold pool) is sampled uniformly from the priors.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    scored = pool.scored()
    n_evolved = round((1.0 - diversity_fraction) * n) if len(scored) >= 2 else 0
    out: list[DefensePolicy] = []
    for i in range(n_evolved):
        if i % 2 == 0:
            parent = scored[_weighted_parent_index(scored, rng)]
            out.append(mutate_policy(parent.policy, priors, rng, ids))
        else:
            ia = _weighted_parent_index(scored, rng)
            rest = scored[:ia] + scored[ia + 1 :]
            ib = _weighted_parent_index(rest, rng)
            out.append(crossover_policy(scored[ia].policy, rest[ib].policy, rng, ids))
    while len(out) < n:
        out.append(sample_uniform_policy(priors, rng, ids))
    return out


def pg_refine(
    top_policies: list[DefensePolicy],
    priors: PriorBounds,
    rng: np.random.Generator,
    ids: PolicyIdAllocator,
) -> list[DefensePolicy]:
    """Local half-step mutations of the given policies; no crossover."""
    if not top_policies:
        raise ValueError("top_policies must be nonempty")
    return [mutate_policy(p, priors, rng, ids, scale=REFINE_SCALE) for p in top_policies]
