"""Adaptive defense loop: policy search, fitness evaluation, coordination."""

from .coordinator import CoordinatorState, Thresholds, co_step, detect_attack
from .fitness import Surrogate, fe_enhance_attacks, fe_fit, fe_rank, fe_validate
from .loop import AedRunner, aed_run, build_world, default_red_team
from .search import (
    PolicyIdAllocator,
    PolicyPool,
    PoolEntry,
    PriorBounds,
    pg_generate,
    pg_refine,
    policy_vector,
)

__all__ = [
    "AedRunner",
    "CoordinatorState",
    "PolicyIdAllocator",
    "PolicyPool",
    "PoolEntry",
    "PriorBounds",
    "Surrogate",
    "Thresholds",
    "aed_run",
    "build_world",
    "co_step",
    "default_red_team",
    "detect_attack",
    "fe_enhance_attacks",
    "fe_fit",
    "fe_rank",
    "fe_validate",
    "pg_generate",
    "pg_refine",
    "policy_vector",
]
