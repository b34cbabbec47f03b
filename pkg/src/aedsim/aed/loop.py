"""The co-evolution loop: train, evaluate, detect, adapt, repeat.

Each epoch trains the predictor under the deployed policy (adversarial
minibatch hardening against the strongest red-team attack), measures clean
and attacked accuracy through the deployed inference path on the held-out
twin dataset, and feeds the record to the coordinator. In NORMAL mode a
generation of candidate policies is produced, surrogate-ranked, twin-
validated top-k only, refined while below the accuracy bound, and rolled
out via shadow deployment; the red team is then escalated against whichever
policies qualified. In UNDER_ATTACK mode the pool freezes, the incident is
characterized from flagged-sample statistics, and a bounded emergency
refinement loop hardens the deployed policy until recovery or fallback.

Everything is driven by named substreams of the master seed, so a run is a
pure function of its config.
"""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING

import numpy as np

from .. import __version__ as _version
from ..attacks import AttackerState, AttackStrategy, evolve_attacker, label_flip
from ..channel import (
    Dataset,
    EnvConfig,
    feature_norm_stats,
    generate_trace,
    make_dataset,
    normalize_features,
)
from ..defenses import (
    DefendedEval,
    DefensePolicy,
    FeatureStats,
    adv_train_epoch,
    defended_accuracy,
    identity_policy,
)
from ..errors import ExperimentError
from ..records import (
    MODE_FALLBACK,
    MODE_NORMAL,
    MODE_UNDER_ATTACK,
    Event,
    ExperimentLog,
    KpiRecord,
    build_summary,
)
from ..seeding import derive_rng, derive_seed
from ..predictor import TrainConfig, init_model
from .coordinator import CoordinatorState, Thresholds, co_step
from .fitness import fe_fit, fe_rank, fe_validate, fe_enhance_attacks
from .search import PolicyIdAllocator, PolicyPool, PriorBounds, pg_generate, pg_refine

if TYPE_CHECKING:  # config imports this package; keep the cycle type-only
    from ..config import RunConfig

SURROGATE_STALE_LIMIT = 3  # consecutive top-1 disagreements before a rebuild


class World:
    """Datasets and feature statistics shared by every scenario."""

    def __init__(self, train_ds: Dataset, eval_ds: Dataset, stats: FeatureStats,
                 eval_trace, norm_mean, norm_std):
        self.train_ds = train_ds
        self.eval_ds = eval_ds
        self.stats = stats
        self.eval_trace = eval_trace
        self.norm_mean = norm_mean
        self.norm_std = norm_std


def build_world(env_cfg: EnvConfig, eval_trace_len: int, master_seed: int) -> World:
    """Simulate the training and held-out twin traces and normalize features.

    Normalization statistics come from the clean training split only, and the
    same z-scoring is applied to the twin split, so attack budgets are in
    feature-std units everywhere.
    """
    train_trace = generate_trace(env_cfg, derive_seed(master_seed, "trace-train"))
    eval_cfg = replace(env_cfg, trace_len=eval_trace_len)
    eval_trace = generate_trace(eval_cfg, derive_seed(master_seed, "trace-eval"))

    train_raw = make_dataset(train_trace, env_cfg.window)
    eval_raw = make_dataset(eval_trace, env_cfg.window)
    mean, std = feature_norm_stats(train_raw.features)
    train_ds = Dataset(normalize_features(train_raw.features, mean, std), train_raw.labels)
    eval_ds = Dataset(normalize_features(eval_raw.features, mean, std), eval_raw.labels)
    stats = FeatureStats.from_samples(train_ds.features)
    return World(train_ds, eval_ds, stats, eval_trace, mean, std)


def default_red_team(priors: PriorBounds, t_min: float) -> list[AttackerState]:
    """The fitness evaluator's starting arsenal: one FGSM, one PGD probe.

    Both escalate (via fe_enhance_attacks) whenever qualified defenses stay
    above t_min against them, up to the physical caps.
    """
    common = dict(
        target_accuracy=t_min,
        escalation_step=0.01,
        eps_cap=priors.eps_cap,
        steps_cap=priors.steps_cap,
    )
    return [
        AttackerState(AttackStrategy(kind="FGSM", eps=0.02), **common),
        AttackerState(AttackStrategy(kind="PGD", eps=0.02, alpha=0.01, steps=3), **common),
    ]


def strongest_attack(red_team: list[AttackerState]) -> AttackStrategy:
    """The training-time hardening target: highest eps, PGD preferred."""
    ranked = sorted(
        red_team, key=lambda a: (a.strategy.eps, a.strategy.kind == "PGD")
    )
    return ranked[-1].strategy


def _estimate_eps(ev: DefendedEval, stats: FeatureStats) -> float:
    """95th percentile of flagged-sample max-|z| distance, in feature units."""
    if ev.flagged_max_z.size == 0:
        return 0.0
    scale = float(np.mean(stats.std))
    return float(np.percentile(ev.flagged_max_z, 95) * scale)


class AedRunner:
    """Owns all mutable state of one AED scenario run."""

    def __init__(
        self,
        env_cfg: EnvConfig,
        train_cfg: TrainConfig,
        priors: PriorBounds,
        thresholds: Thresholds,
        attacker_init: AttackerState,
        run_cfg: RunConfig,
    ):
        self.env_cfg = env_cfg
        self.train_cfg = train_cfg
        self.priors = priors
        self.thresholds = thresholds
        self.run_cfg = run_cfg
        self.master = run_cfg.master_seed

        self.world = build_world(env_cfg, run_cfg.eval_trace_len, self.master)
        if attacker_init.strategy.kind == "LABEL_FLIP":
            # poisoning is a training-time attack: corrupt the corpus once
            self.world.train_ds = label_flip(
                self.world.train_ds,
                attacker_init.strategy.flip_fraction,
                env_cfg.n_ports,
                derive_rng(self.master, "poison"),
            )
        self.model = init_model(
            (env_cfg.window * env_cfg.n_ports, 64, 32, env_cfg.n_ports),
            train_cfg.init_scale,
            derive_seed(self.master, "model-init"),
        )
        self.adversary = attacker_init
        self.red_team = default_red_team(priors, thresholds.t_min)
        self.ids = PolicyIdAllocator()
        self.pool = PolicyPool(capacity=run_cfg.pool_capacity)
        self.fit_history: list[tuple[DefensePolicy, float]] = []
        self.events: list[Event] = []
        self.rows: list[KpiRecord] = []
        self.stale_streak = 0
        self.first_qualified_deploy: int | None = None
        self.policy_table: dict[str, DefensePolicy] = {}

        # bootstrap: validate the all-off policy on the untrained model so the
        # coordinator starts with a (weak but measured) baseline
        initial = identity_policy(self.ids.next())
        self.policy_table[initial.id] = initial
        [(_, fit0)] = fe_validate(
            [initial], self.model, self.world.eval_ds, self.red_team,
            self.world.stats, priors, derive_rng(self.master, "fe-bootstrap"),
        )
        self.pool.add(initial, fit0, 0)
        self.fit_history.append((initial, fit0))
        self.state = CoordinatorState(
            mode=MODE_NORMAL,
            deployed=initial,
            deployed_fitness=fit0,
            baseline=initial,
            baseline_fitness=fit0,
        )
        self._log_deployment(0, initial, fit0, "initial")

    # ------------------------------------------------------------------ events

    def _event(self, epoch: int, kind: str, **data) -> None:
        self.events.append(Event(epoch=epoch, kind=kind, data=data))

    def _register(self, policies: list[DefensePolicy]) -> list[DefensePolicy]:
        for policy in policies:
            self.policy_table[policy.id] = policy
        return policies

    def _log_deployment(self, epoch: int, policy: DefensePolicy, fitness: float, reason: str) -> None:
        self._event(
            epoch, "deployment",
            policy_id=policy.id, validated_fitness=fitness, reason=reason,
        )
        if fitness >= self.thresholds.t_min and self.first_qualified_deploy is None:
            self.first_qualified_deploy = epoch

    def _log_validation(self, epoch: int, results, phase: str) -> None:
        self._event(
            epoch, "validation",
            phase=phase, count=len(results),
            fitness={p.id: f for p, f in results},
        )

    # ------------------------------------------------------------------- epoch

    def run(self) -> ExperimentLog:
        for epoch in range(1, self.run_cfg.max_epochs + 1):
            phase = "train"
            try:
                self._train(epoch)
                phase = "evaluate"
                kpi, ev_att = self._evaluate(epoch)
                phase = "coordinate"
                self._coordinate(epoch, kpi, ev_att)
                phase = "adapt"
                if self.state.mode == MODE_NORMAL:
                    self._normal_branch(epoch)
                elif self.state.mode == MODE_UNDER_ATTACK:
                    self._attack_branch(epoch, ev_att)
                # FALLBACK: hold the baseline and keep observing
                phase = "adversary"
                self._evolve_adversary(epoch, ev_att)
            except (ValueError, RuntimeError, ArithmeticError) as exc:
                raise ExperimentError(epoch, phase, str(exc)) from exc
        summary = build_summary(
            self.rows, self.events, self.thresholds.t_min, self.thresholds.kpi_window
        )
        summary["first_qualified_deploy"] = self.first_qualified_deploy
        header = {
            "artifact_version": _version,
            "master_seed": self.master,
            "config": self.run_cfg.to_dict(),
        }
        return ExperimentLog(header=header, rows=self.rows, events=self.events, summary=summary)

    def _train(self, epoch: int) -> None:
        self.model, _ = adv_train_epoch(
            self.model,
            self.world.train_ds,
            self.state.deployed,
            strongest_attack(self.red_team),
            self.train_cfg,
            derive_rng(self.master, "train", epoch),
        )

    def _evaluate(self, epoch: int) -> tuple[KpiRecord, DefendedEval]:
        deployed = self.state.deployed
        ev_clean = defended_accuracy(
            deployed, self.model, self.world.eval_ds, self.world.stats,
            derive_rng(self.master, "eval-clean", epoch),
        )
        ev_att = defended_accuracy(
            deployed, self.model, self.world.eval_ds, self.world.stats,
            derive_rng(self.master, "eval-att", epoch),
            attack=self.adversary.strategy,
            attack_rng=derive_rng(self.master, "attacker", epoch),
        )
        kpi = KpiRecord(
            epoch=epoch,
            clean_acc=ev_clean.accuracy,
            attacked_acc=ev_att.accuracy,
            detector_flag_rate=ev_att.flag_rate,
            mode=self.state.mode,
            deployed_policy_id=deployed.id,
            attacker_phase=self.adversary.phase,
        )
        # the shadow candidate is measured on the same traffic it would face
        if self.state.mode == MODE_NORMAL and self.state.shadow is not None:
            sh = defended_accuracy(
                self.state.shadow, self.model, self.world.eval_ds, self.world.stats,
                derive_rng(self.master, "shadow", epoch),
                attack=self.adversary.strategy,
                attack_rng=derive_rng(self.master, "attacker-shadow", epoch),
            )
            self.state.shadow_obs.append(sh.accuracy)
        return kpi, ev_att

    def _coordinate(self, epoch: int, kpi: KpiRecord, ev_att: DefendedEval) -> None:
        prev_mode = self.state.mode
        prev_deployed = self.state.deployed.id
        self.state = co_step(
            self.state, kpi, self.thresholds, self.pool,
            emergency_budget=self.run_cfg.refine_budget,
        )
        row = self.state.kpi_history[-1]
        self.rows.append(row)
        if self.state.mode != prev_mode:
            self._event(epoch, "mode_transition", from_mode=prev_mode, to_mode=self.state.mode)
            if prev_mode == MODE_UNDER_ATTACK and self.state.mode == MODE_NORMAL:
                # recovery: archive the surviving policy and the attack trace
                self.pool.add(self.state.deployed, self.state.deployed_fitness, epoch)
                self._event(
                    epoch, "attack_trace",
                    survivor=self.state.deployed.id,
                    adversary_phase=self.adversary.phase,
                    adversary_eps=self.adversary.strategy.eps,
                )
        if self.state.deployed.id != prev_deployed:
            reason = "emergency" if self.state.mode == MODE_UNDER_ATTACK else (
                "fallback" if self.state.mode == MODE_FALLBACK else "shadow_promotion"
            )
            self._log_deployment(epoch, self.state.deployed, self.state.deployed_fitness, reason)

    # ------------------------------------------------------- NORMAL-mode branch

    def _normal_branch(self, epoch: int) -> None:
        run_cfg, thresholds = self.run_cfg, self.thresholds
        # refresh the deployed policy's fitness against the current red team so
        # candidate comparisons share a vintage
        [(_, dep_fit)] = fe_validate(
            [self.state.deployed], self.model, self.world.eval_ds, self.red_team,
            self.world.stats, self.priors, derive_rng(self.master, "fe-deployed", epoch),
        )
        self.state.deployed_fitness = dep_fit
        self.pool.add(self.state.deployed, dep_fit, epoch)
        self.fit_history.append((self.state.deployed, dep_fit))

        candidates = self._register(pg_generate(
            self.pool, self.priors, derive_rng(self.master, "pg", epoch),
            run_cfg.generation_size, run_cfg.diversity_fraction, self.ids,
        ))
        surrogate = fe_fit(self.fit_history, self.priors)
        ranked = fe_rank(surrogate, candidates, run_cfg.k)
        results = fe_validate(
            ranked, self.model, self.world.eval_ds, self.red_team,
            self.world.stats, self.priors, derive_rng(self.master, "fe", epoch),
        )
        self._log_validation(epoch, results, "generation")
        for policy, fitness in results:
            self.pool.add(policy, fitness, epoch)
        self.fit_history.extend(results)

        # FE self-assessment: does the surrogate still rank like the twin?
        predicted_top = ranked[0].id
        measured_top = min(results, key=lambda pf: (-pf[1], pf[0].id))[0].id
        self.stale_streak = 0 if predicted_top == measured_top else self.stale_streak + 1
        if self.stale_streak >= SURROGATE_STALE_LIMIT:
            self.fit_history = [(e.policy, e.fitness) for e in self.pool.scored()]
            self.stale_streak = 0
            self._event(epoch, "surrogate_rebuild", pairs=len(self.fit_history))

        best_policy, best_fitness = min(results, key=lambda pf: (-pf[1], pf[0].id))

        # refine while the best candidate is still below the bound
        iters = 0
        while best_fitness < thresholds.t_min and iters < run_cfg.refine_budget:
            tops = [p for p, _ in sorted(results, key=lambda pf: (-pf[1], pf[0].id))][: run_cfg.k]
            refined = self._register(pg_refine(
                tops, self.priors, derive_rng(self.master, "refine", epoch, iters), self.ids
            ))
            rres = fe_validate(
                refined, self.model, self.world.eval_ds, self.red_team,
                self.world.stats, self.priors,
                derive_rng(self.master, "fe-refine", epoch, iters),
            )
            self._log_validation(epoch, rres, "refine")
            for policy, fitness in rres:
                self.pool.add(policy, fitness, epoch)
            self.fit_history.extend(rres)
            results = results + rres
            cand_policy, cand_fitness = min(rres, key=lambda pf: (-pf[1], pf[0].id))
            if cand_fitness > best_fitness:
                best_policy, best_fitness = cand_policy, cand_fitness
            iters += 1

        self._manage_rollout(epoch, best_policy, best_fitness)

        qualified = [p for p, f in results if f >= thresholds.t_min]
        if qualified:
            before = [(a.strategy.eps, a.strategy.steps) for a in self.red_team]
            self.red_team = fe_enhance_attacks(
                self.red_team, qualified, self.model, self.world.eval_ds,
                self.world.stats, derive_rng(self.master, "enhance", epoch),
            )
            for attack, prev in zip(self.red_team, before):
                now = (attack.strategy.eps, attack.strategy.steps)
                if now != prev:
                    self._event(
                        epoch, "red_team_escalation",
                        kind=attack.strategy.kind, eps=now[0], steps=now[1],
                    )

    def _manage_rollout(self, epoch: int, best_policy: DefensePolicy, best_fitness: float) -> None:
        """Immediate deployment while below the bound; shadow rollout otherwise."""
        state, t_min = self.state, self.thresholds.t_min
        if best_policy.id == state.deployed.id:
            return
        if state.deployed_fitness < t_min and best_fitness > state.deployed_fitness:
            state.deployed = best_policy
            state.deployed_fitness = best_fitness
            state.shadow = None
            state.shadow_obs = []
            self._log_deployment(epoch, best_policy, best_fitness, "refined")
        elif best_fitness >= state.deployed_fitness and (
            state.shadow is None or best_fitness > state.shadow_fitness
        ):
            if state.shadow is None or best_policy.id != state.shadow.id:
                state.shadow = best_policy
                state.shadow_fitness = best_fitness
                state.shadow_obs = []
                self._event(epoch, "shadow_candidate", policy_id=best_policy.id,
                            validated_fitness=best_fitness)
        # a deployed policy that has proven itself becomes the new fallback anchor
        obs = state.kpi_history[-1].observed() if state.kpi_history else 0.0
        if (
            obs >= t_min
            and state.deployed_fitness >= state.baseline_fitness
            and state.deployed.id != state.baseline.id
        ):
            state.baseline = state.deployed
            state.baseline_fitness = state.deployed_fitness
            self._event(epoch, "baseline_update", policy_id=state.deployed.id,
                        validated_fitness=state.deployed_fitness)

    # ------------------------------------------------- UNDER_ATTACK-mode branch

    def _attack_branch(self, epoch: int, ev_att: DefendedEval) -> None:
        state, thresholds = self.state, self.thresholds
        if state.epochs_in_mode == 1:  # just entered: characterize the incident
            eps_est = _estimate_eps(ev_att, self.world.stats)
            base_rows = [r for r in state.kpi_history[:-1] if r.mode == MODE_NORMAL]
            base_acc = (
                float(np.mean([r.observed() for r in base_rows[: thresholds.kpi_window]]))
                if base_rows else 0.0
            )
            kind_guess = "input_perturbation" if ev_att.flag_rate > 0 else "performance_degradation"
            self._event(
                epoch, "attack_characterization",
                kind_guess=kind_guess,
                eps_estimate=eps_est,
                impact=base_acc - state.kpi_history[-1].observed(),
                flag_rate=ev_att.flag_rate,
            )
            # stress-test at the estimated strength, clamped to the physical cap
            target_eps = min(max(eps_est, 0.0), self.priors.eps_cap)
            if target_eps > 0:
                self.red_team = [
                    replace(a, strategy=replace(a.strategy, eps=max(a.strategy.eps, target_eps)))
                    for a in self.red_team
                ]

        # evaluate the current defense under the detected attacks
        [(_, dep_fit)] = fe_validate(
            [state.deployed], self.model, self.world.eval_ds, self.red_team,
            self.world.stats, self.priors, derive_rng(self.master, "fe-emergency", epoch),
        )
        state.deployed_fitness = dep_fit

        iters = 0
        while state.deployed_fitness < thresholds.t_min and state.emergency_budget_left > 0:
            seeds = [e.policy for e in sorted(
                self.pool.scored(), key=lambda e: (-e.fitness, e.policy.id)
            )[: max(1, self.run_cfg.k - 1)]]
            refined = self._register(pg_refine(
                [state.deployed] + seeds, self.priors,
                derive_rng(self.master, "refine-emergency", epoch, iters), self.ids,
            ))
            rres = fe_validate(
                refined, self.model, self.world.eval_ds, self.red_team,
                self.world.stats, self.priors,
                derive_rng(self.master, "fe-emergency-refine", epoch, iters),
            )
            self._log_validation(epoch, rres, "emergency")
            state.emergency_budget_left -= 1
            iters += 1
            cand_policy, cand_fitness = min(rres, key=lambda pf: (-pf[1], pf[0].id))
            if cand_fitness > state.deployed_fitness:
                state.deployed = cand_policy
                state.deployed_fitness = cand_fitness
                self._log_deployment(epoch, cand_policy, cand_fitness, "emergency_refined")

    # ----------------------------------------------------------- the adversary

    def _evolve_adversary(self, epoch: int, ev_att: DefendedEval) -> None:
        prev_phase = self.adversary.phase
        self.adversary = evolve_attacker(self.adversary, ev_att.accuracy)
        if self.adversary.phase != prev_phase:
            self._event(
                epoch, "escalation",
                phase=self.adversary.phase,
                eps=self.adversary.strategy.eps,
                steps=self.adversary.strategy.steps,
            )


def aed_run(
    env_cfg: EnvConfig,
    train_cfg: TrainConfig,
    priors: PriorBounds,
    thresholds: Thresholds,
    attacker_init: AttackerState,
    run_cfg: RunConfig,
) -> ExperimentLog:
    """Run the full co-evolution scenario; deterministic in the master seed."""
    return AedRunner(env_cfg, train_cfg, priors, thresholds, attacker_init, run_cfg).run()
