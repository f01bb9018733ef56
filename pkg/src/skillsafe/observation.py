"""Local observation structures shared by the barrier, skill and world layers.

An observation is an agent's own view of the world: its own state, the
drivable band and curvature at its position (road), neighbors within the
sensing radius in relative coordinates, and a goal descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .errors import MissingNeighborError

AGENT = "agent"
FROZEN = "frozen"
OBSTACLE = "obstacle"


@dataclass(frozen=True)
class BandGeometry:
    """Drivable band [lo, hi] for the lateral offset, with arc derivatives.

    A constant-width lane is lo=-c, hi=+c with zero derivatives; the merge
    wedge narrows the band smoothly, which enters the boundary-barrier
    drift terms through lo_p / lo_pp.
    """

    lo: float
    hi: float
    lo_p: float = 0.0
    hi_p: float = 0.0
    lo_pp: float = 0.0
    hi_pp: float = 0.0
    kappa: float = 0.0


@dataclass(frozen=True)
class NeighborView:
    """One sensed entity, in the observer's coordinates (neighbor minus own)."""

    ref_id: int
    kind: str                 # agent | frozen | obstacle
    rel_pos: np.ndarray       # (p, d) offsets on road, (x, y) on the plane
    rel_vel: np.ndarray       # neighbor velocity minus own velocity
    distance: float
    speed: float = 0.0        # neighbor scalar speed where defined


@dataclass(frozen=True)
class GoalView:
    distance: float
    direction: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass(frozen=True)
class Observation:
    model: str
    own: object
    neighbors: tuple[NeighborView, ...]
    goal: GoalView
    band: BandGeometry | None = None
    lane_width: float = 3.5
    sensing_radius: float = 30.0
    speed_cap: float = 8.0
    left_lane: bool = False
    right_lane: bool = False
    lane_center: float = 0.0


def own_velocity(obs: Observation) -> np.ndarray:
    """Own velocity in the observation's planar frame.

    Road observations use path-frame rates (p_dot, d_dot); planar ones use
    Cartesian (vx, vy).
    """
    s = obs.own
    if obs.model == dyn.FRENET:
        kap = obs.band.kappa if obs.band is not None else 0.0
        denom = 1.0 - s.d * kap
        return np.array([s.v * math.cos(s.psi) / denom, s.v * math.sin(s.psi)])
    if obs.model == dyn.DOUBLE_INTEGRATOR:
        return np.array([s.vx, s.vy])
    return np.array([s.v * s.cos_t, s.v * s.sin_t])


def own_speed(obs: Observation) -> float:
    s = obs.own
    if obs.model == dyn.DOUBLE_INTEGRATOR:
        return float(math.hypot(s.vx, s.vy))
    return float(s.v)


def find_neighbor(obs: Observation, ref_id: int) -> NeighborView:
    for nb in obs.neighbors:
        if nb.ref_id == ref_id:
            return nb
    raise MissingNeighborError(f"neighbor {ref_id} not in observation")
