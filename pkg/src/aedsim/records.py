"""Epoch records, run events, and the experiment log with its file formats.

The CSV schema is frozen:

    epoch,mode,attacker_phase,clean_acc,attacked_acc,detector_flag_rate,policy_id

Every CSV row is a projection of the corresponding JSON record, with the
same float formatting (shortest round-trip repr), so the two files stay
byte-coherent. Nothing time- or host-dependent is written, which makes
re-runs byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace  # noqa: F401  (replace is part of the API)

import numpy as np

CSV_HEADER = "epoch,mode,attacker_phase,clean_acc,attacked_acc,detector_flag_rate,policy_id"

MODE_NORMAL = "NORMAL"
MODE_UNDER_ATTACK = "UNDER_ATTACK"
MODE_FALLBACK = "FALLBACK"
MODES = (MODE_NORMAL, MODE_UNDER_ATTACK, MODE_FALLBACK)


@dataclass(frozen=True)
class KpiRecord:
    """One epoch's KPIs.

    ``mode`` is the coordinator mode after processing this record, while
    ``deployed_policy_id`` names the policy that actually produced the
    measurements (i.e. the one deployed during the epoch).
    """

    epoch: int
    clean_acc: float
    attacked_acc: float | None = None
    detector_flag_rate: float | None = None
    mode: str = MODE_NORMAL
    deployed_policy_id: str = ""
    attacker_phase: int = 0

    def observed(self) -> float:
        """The accuracy the system actually experiences this epoch."""
        return self.attacked_acc if self.attacked_acc is not None else self.clean_acc

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mode": self.mode,
            "attacker_phase": self.attacker_phase,
            "clean_acc": self.clean_acc,
            "attacked_acc": self.attacked_acc,
            "detector_flag_rate": self.detector_flag_rate,
            "policy_id": self.deployed_policy_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KpiRecord":
        return cls(
            epoch=d["epoch"],
            clean_acc=d["clean_acc"],
            attacked_acc=d["attacked_acc"],
            detector_flag_rate=d["detector_flag_rate"],
            mode=d["mode"],
            deployed_policy_id=d["policy_id"],
            attacker_phase=d["attacker_phase"],
        )

    def csv_row(self) -> str:
        return ",".join(
            (
                str(self.epoch),
                self.mode,
                str(self.attacker_phase),
                _fmt(self.clean_acc),
                _fmt(self.attacked_acc),
                _fmt(self.detector_flag_rate),
                self.deployed_policy_id,
            )
        )


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


@dataclass(frozen=True)
class Event:
    """Something that happened at an epoch: deployments, escalations, ..."""

    epoch: int
    kind: str
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "kind": self.kind, "data": self.data}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(epoch=d["epoch"], kind=d["kind"], data=d["data"])


@dataclass
class ExperimentLog:
    header: dict  # artifact_version, master_seed, resolved config
    rows: list[KpiRecord]
    events: list[Event]
    summary: dict

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "rows": [r.to_dict() for r in self.rows],
            "events": [e.to_dict() for e in self.events],
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentLog":
        return cls(
            header=d["header"],
            rows=[KpiRecord.from_dict(r) for r in d["rows"]],
            events=[Event.from_dict(e) for e in d["events"]],
            summary=d["summary"],
        )

    def to_csv(self) -> str:
        lines = [CSV_HEADER] + [r.csv_row() for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, json_path) -> "ExperimentLog":
        with open(json_path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def phase_means(rows: list[KpiRecord]) -> dict[int, float]:
    """Mean attacked accuracy per attacker phase (phases with data only)."""
    buckets: dict[int, list[float]] = {}
    for r in rows:
        if r.attacked_acc is not None:
            buckets.setdefault(r.attacker_phase, []).append(r.attacked_acc)
    return {phase: float(np.mean(v)) for phase, v in sorted(buckets.items())}


def phase_trend_slope(means: dict[int, float]) -> float | None:
    """Least-squares slope of per-phase mean attacked accuracy vs phase."""
    if len(means) < 2:
        return None
    phases = np.array(sorted(means), dtype=float)
    vals = np.array([means[p] for p in sorted(means)])
    return float(np.polyfit(phases, vals, 1)[0])


def build_summary(
    rows: list[KpiRecord],
    events: list[Event],
    t_min: float | None,
    kpi_window: int,
) -> dict:
    """Per-run aggregates mirrored by the report command."""
    clean = [r.clean_acc for r in rows]
    attacked = [r.attacked_acc for r in rows if r.attacked_acc is not None]
    w = min(kpi_window, len(rows)) or 1
    means = phase_means(rows)
    epochs_to_t_min = None
    if t_min is not None:
        for r in rows:
            if r.observed() >= t_min:
                epochs_to_t_min = r.epoch
                break
    mode_epochs: dict[str, int] = {}
    for r in rows:
        mode_epochs[r.mode] = mode_epochs.get(r.mode, 0) + 1
    return {
        "epochs": len(rows),
        "final_window_clean_mean": float(np.mean(clean[-w:])) if clean else None,
        "final_window_attacked_mean": (
            float(np.mean(attacked[-w:])) if attacked else None
        ),
        "epochs_to_t_min": epochs_to_t_min,
        "phase_attacked_means": {str(k): v for k, v in means.items()},
        "phase_trend_slope": phase_trend_slope(means),
        "mode_epochs": mode_epochs,
        "deployments": sum(1 for e in events if e.kind == "deployment"),
        "validation_calls": sum(1 for e in events if e.kind == "validation"),
        "validated_candidates": sum(
            e.data.get("count", 0) for e in events if e.kind == "validation"
        ),
    }
