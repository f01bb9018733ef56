"""Temporal-abstraction bookkeeping over variable-length skill segments.

Decision epochs, discounted in-segment returns, and the one-step
segment-level TD advantage.  Under the asynchronous scheme only agents
whose skill terminated re-decide; the synchronous any/all schemes are
kept behind a flag for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

CONTINUE = "continue"
ANY = "any"
ALL = "all"


@dataclass
class SegmentTransition:
    agent_id: int
    obs_start: np.ndarray        # agent observation vector at initiation
    joint_start: np.ndarray      # joint observation vector at initiation
    skill_index: int
    duration: int                # k, steps
    seg_return: float            # discounted in-segment extrinsic return
    obs_end: np.ndarray
    joint_end: np.ndarray
    done: bool
    t_abs: int
    mask_start: np.ndarray | None = None
    mask_end: np.ndarray | None = None
    log_prob: float = 0.0
    policy_version: int = 0
    advantage: float = 0.0

    def __post_init__(self):
        if self.duration < 1:
            raise DomainError("segment duration must be at least 1")


@dataclass
class EpochSchedule:
    epochs: dict = field(default_factory=dict)   # agent -> sorted step list

    def of(self, agent_id) -> list:
        return self.epochs[agent_id]


def decision_epochs(per_agent_termination_steps: dict,
                    scheme: str = CONTINUE) -> EpochSchedule:
    """Decision-step indices per agent given natural termination steps.

    continue: each agent re-decides exactly when its own skill ends.
    any: every agent re-decides whenever any skill ends.
    all: everyone re-decides when the last outstanding skill of the
    current round ends.
    """
    agents = list(per_agent_termination_steps)
    out = {}
    if scheme == CONTINUE:
        for a in agents:
            steps = sorted(set(per_agent_termination_steps[a]))
            out[a] = [0] + [s for s in steps if s > 0]
    elif scheme == ANY:
        merged = sorted({s for steps in per_agent_termination_steps.values()
                         for s in steps if s > 0})
        for a in agents:
            out[a] = [0] + merged
    elif scheme == ALL:
        rounds = zip(*(sorted(per_agent_termination_steps[a]) for a in agents))
        joint = [max(r) for r in rounds]
        for a in agents:
            out[a] = [0] + [s for s in sorted(set(joint)) if s > 0]
    else:
        raise DomainError(f"unknown termination scheme {scheme!r}")
    for a in agents:
        seq = out[a]
        if any(b <= c for b, c in zip(seq[1:], seq[:-1])):
            raise DomainError("epochs must be strictly increasing")
    return EpochSchedule(epochs=out)


def segment_return(step_rewards, gamma: float) -> float:
    """Discounted sum of the rewards collected while one skill ran."""
    rewards = list(step_rewards)
    if not rewards:
        raise DomainError("segment needs at least one reward")
    if not 0.0 < gamma <= 1.0:
        raise DomainError("gamma must be in (0, 1]")
    total, scale = 0.0, 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


def trajectory_return(segments, gamma: float) -> float:
    """Sum of gamma^(t_abs) * segment return; equals the flat discounted
    per-step sum along the trajectory, pathwise."""
    return float(sum(gamma ** s.t_abs * s.seg_return for s in segments))


def high_advantage(critic, seg: SegmentTransition, gamma: float) -> float:
    """One-step segment TD advantage with bootstrap masked at terminals."""
    v_start = float(critic(seg.joint_start))
    v_end = 0.0 if seg.done else float(critic(seg.joint_end))
    return seg.seg_return + (gamma ** seg.duration) * v_end - v_start
