"""Scenario execution and log aggregation.

Three scenarios share one simulated world per master seed:

  CLEAN     plain training with epoch-end clean evaluation,
  ATTACKED  CLEAN plus an evolving adversary perturbing evaluation inputs
            on the fly (or poisoning training labels, for LABEL_FLIP),
  AED       the full co-evolution loop.

run_scenario writes ``log.json`` and ``kpi.csv`` (plus ``policies.json``
for AED) into the config's output directory and removes partial outputs on
failure. ``report`` recomputes summaries from the raw rows of one or more
logs and emits cross-log deltas.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import __version__
from .aed.loop import AedRunner, build_world
from .attacks import evolve_attacker, label_flip, perturb_features
from .channel import Dataset
from .config import RunConfig, policy_to_dict
from .errors import ExperimentError
from .predictor import evaluate_accuracy, init_model, sgd_epoch
from .records import (
    Event,
    ExperimentLog,
    KpiRecord,
    build_summary,
    phase_means,
    phase_trend_slope,
)
from .seeding import derive_rng, derive_seed


def _header(cfg: RunConfig) -> dict:
    return {
        "artifact_version": __version__,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
    }


def _run_clean_or_attacked(cfg: RunConfig) -> ExperimentLog:
    attacked = cfg.scenario == "ATTACKED"
    world = build_world(cfg.env, cfg.eval_trace_len, cfg.master_seed)
    train_ds = world.train_ds
    adversary = cfg.attacker
    if attacked and adversary.strategy.kind == "LABEL_FLIP":
        train_ds = label_flip(
            train_ds,
            adversary.strategy.flip_fraction,
            cfg.env.n_ports,
            derive_rng(cfg.master_seed, "poison"),
        )
    model = init_model(
        (cfg.env.window * cfg.env.n_ports, 64, 32, cfg.env.n_ports),
        cfg.train.init_scale,
        derive_seed(cfg.master_seed, "model-init"),
    )
    rows: list[KpiRecord] = []
    events: list[Event] = []
    for epoch in range(1, cfg.max_epochs + 1):
        try:
            model, _ = sgd_epoch(model, train_ds, cfg.train, derive_rng(cfg.master_seed, "train", epoch))
            clean_acc = evaluate_accuracy(model, world.eval_ds)
            attacked_acc = None
            phase = 0
            if attacked:
                attack_rng = derive_rng(cfg.master_seed, "attacker", epoch)
                strategy = adversary.strategy

                def transform(features, labels):
                    return perturb_features(strategy, model, features, labels, attack_rng)

                attacked_acc = evaluate_accuracy(model, world.eval_ds, input_transform=transform)
                phase = adversary.phase
        except (ValueError, RuntimeError, ArithmeticError) as exc:
            raise ExperimentError(epoch, "train/evaluate", str(exc)) from exc
        rows.append(
            KpiRecord(
                epoch=epoch,
                clean_acc=clean_acc,
                attacked_acc=attacked_acc,
                detector_flag_rate=None,
                deployed_policy_id="",
                attacker_phase=phase,
            )
        )
        if attacked:
            prev_phase = adversary.phase
            adversary = evolve_attacker(adversary, attacked_acc)
            if adversary.phase != prev_phase:
                events.append(
                    Event(
                        epoch=epoch,
                        kind="escalation",
                        data={
                            "phase": adversary.phase,
                            "eps": adversary.strategy.eps,
                            "steps": adversary.strategy.steps,
                        },
                    )
                )
    summary = build_summary(rows, events, cfg.thresholds.t_min, cfg.thresholds.kpi_window)
    return ExperimentLog(header=_header(cfg), rows=rows, events=events, summary=summary)


def run_scenario(cfg: RunConfig) -> ExperimentLog:
    """Execute the configured scenario and write its outputs."""
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "log.json"
    csv_path = out_dir / "kpi.csv"
    policies_path = out_dir / "policies.json"
    written: list[Path] = []
    try:
        policy_table = None
        if cfg.scenario == "AED":
            runner = AedRunner(
                cfg.env, cfg.train, cfg.priors, cfg.thresholds, cfg.attacker, cfg
            )
            log = runner.run()
            policy_table = runner.policy_table
        else:
            log = _run_clean_or_attacked(cfg)
        written = [json_path, csv_path]
        log.write(json_path, csv_path)
        if policy_table is not None:
            written.append(policies_path)
            with open(policies_path, "w", encoding="utf-8") as fh:
                json.dump(
                    {pid: policy_to_dict(p) for pid, p in sorted(policy_table.items())},
                    fh,
                    indent=2,
                )
                fh.write("\n")
        return log
    except Exception:
        for path in written:
            if path.exists():
                os.unlink(path)
        raise


def _summarize_log(path: str, log: ExperimentLog) -> dict:
    """Recompute a log's summary from its raw rows (never trust the file's)."""
    thresholds = log.header.get("config", {}).get("thresholds", {})
    t_min = thresholds.get("t_min")
    window = thresholds.get("kpi_window", 5)
    for i, row in enumerate(log.rows):
        if row.epoch != (log.rows[i - 1].epoch + 1 if i else row.epoch):
            raise ValueError(f"{path}: row {i} has non-consecutive epoch {row.epoch}")
    summary = build_summary(log.rows, log.events, t_min, window)
    means = phase_means(log.rows)
    return {
        "path": path,
        "scenario": log.header.get("config", {}).get("scenario"),
        "epochs": summary["epochs"],
        "final_window_clean_mean": summary["final_window_clean_mean"],
        "final_window_attacked_mean": summary["final_window_attacked_mean"],
        "epochs_to_t_min": summary["epochs_to_t_min"],
        "phase_attacked_means": {str(k): v for k, v in means.items()},
        "phase_trend_slope": phase_trend_slope(means),
    }


def report(log_paths: list[str]) -> dict:
    """Summaries for each log plus cross-log deltas against the first."""
    if not log_paths:
        raise ValueError("at least one log path is required")
    summaries = []
    for path in log_paths:
        try:
            log = ExperimentLog.load(path)
        except FileNotFoundError:
            raise ValueError(f"{path}: no such log") from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed log ({exc})") from None
        summaries.append(_summarize_log(str(path), log))
    deltas = []
    base = summaries[0]
    for other in summaries[1:]:
        delta = {"path": other["path"], "vs": base["path"]}
        for key in ("final_window_clean_mean", "final_window_attacked_mean", "epochs_to_t_min"):
            a, b = other[key], base[key]
            delta[key] = None if a is None or b is None else a - b
        deltas.append(delta)
    return {"logs": summaries, "deltas": deltas}


def format_report_text(rep: dict) -> str:
    """Fixed-width rendering of a report dict."""
    lines = []
    header = f"{'log':<40} {'scenario':<9} {'epochs':>6} {'clean':>8} {'attacked':>9} {'to_t_min':>9} {'slope':>9}"
    lines.append(header)
    lines.append("-" * len(header))

    def fmt(v, num="{:8.4f}"):
        return "-" if v is None else num.format(v)

    for s in rep["logs"]:
        lines.append(
            f"{s['path']:<40} {str(s['scenario']):<9} {s['epochs']:>6} "
            f"{fmt(s['final_window_clean_mean']):>8} {fmt(s['final_window_attacked_mean']):>9} "
            f"{str(s['epochs_to_t_min'] if s['epochs_to_t_min'] is not None else '-'):>9} "
            f"{fmt(s['phase_trend_slope'], '{:9.5f}'):>9}"
        )
        if s["phase_attacked_means"]:
            per_phase = ", ".join(
                f"{k}: {v:.4f}" for k, v in s["phase_attacked_means"].items()
            )
            lines.append(f"    per-phase attacked mean: {per_phase}")
    for d in rep["deltas"]:
        lines.append(
            f"delta {d['path']} vs {d['vs']}: "
            f"clean {fmt(d['final_window_clean_mean'])}, "
            f"attacked {fmt(d['final_window_attacked_mean'])}, "
            f"epochs_to_t_min {d['epochs_to_t_min'] if d['epochs_to_t_min'] is not None else '-'}"
        )
    return "\n".join(lines) + "\n"
