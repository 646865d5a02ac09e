"""Iterative retrieval loop: refine queries, rerank results, stop when stable."""

from .core import (
    Action,
    Decision,
    Document,
    RankedList,
    ReasoningState,
    StopCause,
    Trajectory,
    Transition,
    state_equivalent,
)
from .engine import EngineConfig, TrajectoryResult, run_batch, run_trajectory
from .policy import PolicyConfig, decide, parse_decision, render_policy_prompt

__all__ = [
    "Action",
    "Decision",
    "Document",
    "EngineConfig",
    "PolicyConfig",
    "RankedList",
    "ReasoningState",
    "StopCause",
    "Trajectory",
    "TrajectoryResult",
    "Transition",
    "decide",
    "parse_decision",
    "render_policy_prompt",
    "run_batch",
    "run_trajectory",
    "state_equivalent",
]

__version__ = "0.1.0"
