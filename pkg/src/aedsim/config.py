"""Experiment configuration: strict parsing, defaults, round-tripping.

Config files are JSON with nested sections (env, train, priors, thresholds,
attacker). Parsing is strict: unknown keys and out-of-range values are
errors carrying the dotted key path. All defaults are materialized into the
resolved config that gets echoed into every log header, so a log is always
reproducible from its own header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .aed.coordinator import Thresholds
from .aed.search import PriorBounds
from .attacks import AttackerState, AttackStrategy
from .channel import EnvConfig
from .defenses import DefensePolicy
from .errors import ConfigurationError
from .predictor import TrainConfig

SCENARIOS = ("CLEAN", "ATTACKED", "AED")

_TOP_DEFAULTS = {
    "max_epochs": 60,
    "master_seed": 7,
    "output_dir": "runs/out",
    "k": 3,
    "generation_size": 12,
    "diversity_fraction": 0.25,
    "refine_budget": 5,
    "pool_capacity": 64,
    "eval_trace_len": 6_000,
}

_ENV_KEYS = ("n_ports", "window", "rho_t", "rho_s", "trace_len", "noise_floor")
_TRAIN_KEYS = ("learning_rate", "batch_size", "init_scale")
_PRIOR_KEYS = (
    "adv_ratio",
    "smooth_sigma",
    "votes",
    "quant_bits",
    "detect_z",
    "pgd_train_steps",
    "eps_cap",
    "steps_cap",
)
_THRESHOLD_KEYS = ("t_min", "t_detect_drop", "kpi_window")
_ATTACKER_KEYS = (
    "kind",
    "eps",
    "alpha",
    "steps",
    "delay",
    "flip_fraction",
    "random_start",
    "target_accuracy",
    "escalation_step",
)


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    max_epochs: int
    master_seed: int
    output_dir: str
    k: int
    generation_size: int
    diversity_fraction: float
    refine_budget: int
    pool_capacity: int
    eval_trace_len: int
    env: EnvConfig
    train: TrainConfig
    priors: PriorBounds
    thresholds: Thresholds
    attacker: AttackerState

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigurationError("scenario", f"must be one of {SCENARIOS}, got {self.scenario!r}")
        for name, minimum in (
            ("max_epochs", 1),
            ("k", 1),
            ("generation_size", 1),
            ("refine_budget", 0),
            ("pool_capacity", 1),
        ):
            if getattr(self, name) < minimum:
                raise ConfigurationError(name, f"must be >= {minimum}, got {getattr(self, name)}")
        if not 0.0 <= self.diversity_fraction <= 1.0:
            raise ConfigurationError(
                "diversity_fraction", f"must be in [0, 1], got {self.diversity_fraction}"
            )
        try:
            self.env.validate()
        except ConfigurationError as exc:
            raise ConfigurationError(f"env.{exc.key}", exc.message) from None
        if self.eval_trace_len <= self.env.window + 1:
            raise ConfigurationError(
                "eval_trace_len",
                f"must exceed env.window + 1 = {self.env.window + 1}, got {self.eval_trace_len}",
            )
        try:
            self.train.validate()
        except ConfigurationError as exc:
            raise ConfigurationError(f"train.{exc.key}", exc.message) from None
        if self.train.batch_size > self.env.trace_len - self.env.window:
            raise ConfigurationError(
                "train.batch_size",
                f"exceeds training dataset size {self.env.trace_len - self.env.window}",
            )
        try:
            self.priors.validate()
        except ConfigurationError as exc:
            raise ConfigurationError(f"priors.{exc.key}", exc.message) from None
        try:
            self.thresholds.validate()
        except ConfigurationError as exc:
            raise ConfigurationError(f"thresholds.{exc.key}", exc.message) from None
        try:
            self.attacker.strategy.validate(eps_cap=self.priors.eps_cap)
        except ConfigurationError as exc:
            raise ConfigurationError(f"attacker.{exc.key}", exc.message) from None
        if not 0.0 <= self.attacker.target_accuracy <= 1.0:
            raise ConfigurationError(
                "attacker.target_accuracy",
                f"must be in [0, 1], got {self.attacker.target_accuracy}",
            )
        if self.attacker.escalation_step < 0:
            raise ConfigurationError(
                "attacker.escalation_step",
                f"must be >= 0, got {self.attacker.escalation_step}",
            )

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "max_epochs": self.max_epochs,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "k": self.k,
            "generation_size": self.generation_size,
            "diversity_fraction": self.diversity_fraction,
            "refine_budget": self.refine_budget,
            "pool_capacity": self.pool_capacity,
            "eval_trace_len": self.eval_trace_len,
            "env": {key: getattr(self.env, key) for key in _ENV_KEYS},
            "train": {key: getattr(self.train, key) for key in _TRAIN_KEYS},
            "priors": {
                "adv_ratio": list(self.priors.adv_ratio),
                "smooth_sigma": list(self.priors.smooth_sigma),
                "votes": list(self.priors.votes),
                "quant_bits": list(self.priors.quant_bits),
                "detect_z": list(self.priors.detect_z),
                "pgd_train_steps": list(self.priors.pgd_train_steps),
                "eps_cap": self.priors.eps_cap,
                "steps_cap": self.priors.steps_cap,
            },
            "thresholds": {key: getattr(self.thresholds, key) for key in _THRESHOLD_KEYS},
            "attacker": {
                "kind": self.attacker.strategy.kind,
                "eps": self.attacker.strategy.eps,
                "alpha": self.attacker.strategy.alpha,
                "steps": self.attacker.strategy.steps,
                "delay": self.attacker.strategy.delay,
                "flip_fraction": self.attacker.strategy.flip_fraction,
                "random_start": self.attacker.strategy.random_start,
                "target_accuracy": self.attacker.target_accuracy,
                "escalation_step": self.attacker.escalation_step,
            },
        }


def _check_keys(section: dict, allowed: tuple, prefix: str) -> None:
    for key in section:
        if key not in allowed:
            path = f"{prefix}.{key}" if prefix else key
            raise ConfigurationError(path, "unknown key")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(name, f"must be an object, got {type(value).__name__}")
    return value


def _pair(section: dict, key: str, default: tuple, prefix: str) -> tuple:
    value = section.get(key, list(default))
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigurationError(f"{prefix}.{key}", "must be a [min, max] pair")
    return (float(value[0]), float(value[1]))


def _int_set(section: dict, key: str, default: tuple, prefix: str) -> tuple:
    value = section.get(key, list(default))
    if not isinstance(value, list) or not value:
        raise ConfigurationError(f"{prefix}.{key}", "must be a nonempty list")
    return tuple(int(v) for v in value)


def config_from_dict(raw: dict) -> RunConfig:
    """Build and validate a RunConfig from a (possibly minimal) JSON dict."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config", "top level must be an object")
    top_allowed = ("scenario", *_TOP_DEFAULTS, "env", "train", "priors", "thresholds", "attacker")
    _check_keys(raw, top_allowed, "")
    if "scenario" not in raw:
        raise ConfigurationError("scenario", "required key is missing")
    scenario = raw["scenario"]
    if scenario in ("ATTACKED", "AED") and "attacker" not in raw:
        raise ConfigurationError("attacker", f"section required for scenario {scenario}")
    if scenario == "AED":
        for name in ("priors", "thresholds"):
            if name not in raw:
                raise ConfigurationError(name, "section required for scenario AED")

    top = {key: raw.get(key, default) for key, default in _TOP_DEFAULTS.items()}

    env_raw = _section(raw, "env")
    _check_keys(env_raw, _ENV_KEYS, "env")
    env = EnvConfig(**{k: env_raw[k] for k in _ENV_KEYS if k in env_raw})

    train_raw = _section(raw, "train")
    _check_keys(train_raw, _TRAIN_KEYS, "train")
    train = TrainConfig(
        epochs=int(top["max_epochs"]),
        **{k: train_raw[k] for k in _TRAIN_KEYS if k in train_raw},
    )

    priors_raw = _section(raw, "priors")
    _check_keys(priors_raw, _PRIOR_KEYS, "priors")
    defaults = PriorBounds()
    priors = PriorBounds(
        adv_ratio=_pair(priors_raw, "adv_ratio", defaults.adv_ratio, "priors"),
        smooth_sigma=_pair(priors_raw, "smooth_sigma", defaults.smooth_sigma, "priors"),
        votes=_int_set(priors_raw, "votes", defaults.votes, "priors"),
        quant_bits=_int_set(priors_raw, "quant_bits", defaults.quant_bits, "priors"),
        detect_z=_pair(priors_raw, "detect_z", defaults.detect_z, "priors"),
        pgd_train_steps=_int_set(priors_raw, "pgd_train_steps", defaults.pgd_train_steps, "priors"),
        eps_cap=float(priors_raw.get("eps_cap", defaults.eps_cap)),
        steps_cap=int(priors_raw.get("steps_cap", defaults.steps_cap)),
    )

    thr_raw = _section(raw, "thresholds")
    _check_keys(thr_raw, _THRESHOLD_KEYS, "thresholds")
    thresholds = Thresholds(**{k: thr_raw[k] for k in _THRESHOLD_KEYS if k in thr_raw})

    att_raw = _section(raw, "attacker")
    _check_keys(att_raw, _ATTACKER_KEYS, "attacker")
    strategy_defaults = AttackStrategy(kind="PGD", eps=0.01, alpha=0.01, steps=1)
    strategy = AttackStrategy(
        kind=att_raw.get("kind", strategy_defaults.kind),
        eps=float(att_raw.get("eps", strategy_defaults.eps)),
        alpha=float(att_raw.get("alpha", strategy_defaults.alpha)),
        steps=int(att_raw.get("steps", strategy_defaults.steps)),
        delay=int(att_raw.get("delay", strategy_defaults.delay)),
        flip_fraction=float(att_raw.get("flip_fraction", strategy_defaults.flip_fraction)),
        random_start=bool(att_raw.get("random_start", strategy_defaults.random_start)),
    )
    attacker = AttackerState(
        strategy=strategy,
        target_accuracy=float(att_raw.get("target_accuracy", 0.30)),
        escalation_step=float(att_raw.get("escalation_step", 0.01)),
        eps_cap=priors.eps_cap,
        steps_cap=priors.steps_cap,
    )

    cfg = RunConfig(
        scenario=scenario,
        max_epochs=int(top["max_epochs"]),
        master_seed=int(top["master_seed"]),
        output_dir=str(top["output_dir"]),
        k=int(top["k"]),
        generation_size=int(top["generation_size"]),
        diversity_fraction=float(top["diversity_fraction"]),
        refine_budget=int(top["refine_budget"]),
        pool_capacity=int(top["pool_capacity"]),
        eval_trace_len=int(top["eval_trace_len"]),
        env=env,
        train=train,
        priors=priors,
        thresholds=thresholds,
        attacker=attacker,
    )
    cfg.validate()
    return cfg


def parse_config(path) -> RunConfig:
    """Read, strictly parse, and validate a config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError("config", f"invalid JSON in {path}: {exc}") from None
    return config_from_dict(raw)


def policy_to_dict(policy: DefensePolicy) -> dict:
    d = {"id": policy.id, **policy.knobs(), "parent_id": policy.parent_id}
    if math.isinf(d["detect_z"]):
        d["detect_z"] = "inf"
    return d
