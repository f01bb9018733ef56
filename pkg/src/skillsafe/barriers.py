"""Barrier and Lyapunov constraint rows for the per-step control program.

Every hard constraint has the form  G u <= h  and encodes the high-order
barrier inequality

    Lf^m b + Lg Lf^(m-1) b u + (sum of lower-order class-K terms) >= 0

with linear class-K functions alpha(x) = gain * x, so that for m=2 the
inequality expands exactly to  b'' + (g1+g2) b' + g1 g2 b >= 0  and for
m=1 to  b' + g1 b >= 0.

Soft rows encode Lyapunov decrease  LfV + LgV u + rate * V <= e  with a
single slack variable per row.

Supported barrier families and their analytic relative degrees:

    inter_agent     degree 1 on road models (speed-scaled radius, the
                    control enters through d r(v)/dv), degree 2 on the
                    planar models with a fixed radius
    road_boundary   degree 2 (path model with a drivable band, or a
                    half-space along one axis of a double integrator)
    static_obstacle degree 2 (planar circle with squared clearance)

Neighbor motion is treated as a measured disturbance: observed neighbor
velocities enter the drift terms and neighbor acceleration is taken as
zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .errors import DegreeError, DomainError
from .observation import (Observation, NeighborView, find_neighbor,
                          own_speed, own_velocity)

INTER_AGENT = "inter_agent"
ROAD_BOUNDARY = "road_boundary"
STATIC_OBSTACLE = "static_obstacle"

CBF_HARD = "cbf_hard"
CLF_SOFT = "clf_soft"


@dataclass(frozen=True)
class ClassK:
    """Linear class-K function alpha(x) = gain * x with gain > 0."""

    gain: float

    def __post_init__(self):
        if not (self.gain > 0.0 and math.isfinite(self.gain)):
            raise DomainError(f"class-K gain must be positive, got {self.gain}")

    def __call__(self, x: float) -> float:
        return self.gain * x


@dataclass(frozen=True)
class BarrierSpec:
    """Geometry and order of one safety constraint family."""

    kind: str
    rel_degree: int
    footprint_radius: float = 2.0    # r0, meters
    speed_gain: float = 0.0          # r1, seconds; radius r(v) = r0 + r1 max(v, 0)
    obstacle_margin: float = 1.0     # squared clearance for static obstacles
    side: str | None = None          # boundary rows: "upper" (<= hi) or "lower"
    axis: int = 0                    # boundary coordinate for planar models

    def __post_init__(self):
        if self.kind not in (INTER_AGENT, ROAD_BOUNDARY, STATIC_OBSTACLE):
            raise DomainError(f"unknown barrier kind {self.kind!r}")
        if self.rel_degree not in (1, 2):
            raise DomainError("relative degree must be 1 or 2")
        if self.kind == ROAD_BOUNDARY and self.side not in ("upper", "lower"):
            raise DomainError("boundary spec needs side='upper'|'lower'")
        if min(self.footprint_radius, self.obstacle_margin) <= 0.0:
            raise DomainError("geometry parameters must be positive")


@dataclass(frozen=True)
class ConstraintRow:
    """One inequality row over the decision vector [controls; slacks]."""

    g_coeffs: np.ndarray
    h_rhs: float
    kind: str
    slack_index: int | None = None
    gain_partials: tuple = ()        # d h / d gain_i for hard rows
    rate_partial: float | None = None  # d h / d rate for soft rows


def radius(spec: BarrierSpec, v: float) -> float:
    return spec.footprint_radius + spec.speed_gain * max(v, 0.0)


def _radius_derivative(spec: BarrierSpec, v: float) -> float:
    # one-sided derivative at rest: keeps the row of a stopped agent
    # feasible; invariance is carried by the faster agent's row, whose
    # barrier is a lower bound on the stopped agent's (radius monotone)
    return spec.speed_gain if v >= 0.0 else 0.0


def _validate_degree(spec: BarrierSpec, model: str) -> None:
    if spec.kind == INTER_AGENT:
        if spec.rel_degree == 1:
            if model not in (dyn.FRENET, dyn.CARTESIAN) or spec.speed_gain <= 0.0:
                raise DegreeError(
                    "degree-1 inter-agent rows need a scalar-speed model and "
                    "a speed-scaled radius")
        else:
            if spec.speed_gain != 0.0 or model not in (dyn.DOUBLE_INTEGRATOR,
                                                       dyn.CARTESIAN):
                raise DegreeError(
                    "degree-2 inter-agent rows need a fixed radius on a "
                    "planar model")
    elif spec.kind == ROAD_BOUNDARY:
        if spec.rel_degree != 2 or model not in (dyn.FRENET,
                                                 dyn.DOUBLE_INTEGRATOR):
            raise DegreeError("boundary rows have relative degree 2 on the "
                              "path or double-integrator models")
    elif spec.kind == STATIC_OBSTACLE:
        if spec.rel_degree != 2 or model not in (dyn.DOUBLE_INTEGRATOR,
                                                 dyn.CARTESIAN):
            raise DegreeError("obstacle rows have relative degree 2 on the "
                              "planar models")


def _resolve(obs: Observation, neighbor) -> NeighborView | None:
    if isinstance(neighbor, (int, np.integer)):
        return find_neighbor(obs, int(neighbor))
    return neighbor


def eval_barrier(spec: BarrierSpec, obs: Observation,
                 neighbor: NeighborView | int | None = None) -> float:
    """Barrier value; nonnegative exactly on the safe set.

    ``neighbor`` may be a view or an entity id resolved against the
    observation (raising MissingNeighborError when absent)."""
    neighbor = _resolve(obs, neighbor)
    if spec.kind == ROAD_BOUNDARY:
        lat = _lateral(spec, obs)
        band = obs.band
        if spec.side == "upper":
            return float(band.hi - lat)
        return float(lat - band.lo)
    if neighbor is None:
        raise DomainError(f"{spec.kind} barrier needs a neighbor")
    sq = float(neighbor.rel_pos @ neighbor.rel_pos)
    if spec.kind == STATIC_OBSTACLE:
        return sq - spec.obstacle_margin
    return sq - radius(spec, own_speed(obs)) ** 2


def _lateral(spec: BarrierSpec, obs: Observation) -> float:
    if obs.model == dyn.FRENET:
        return obs.own.d
    if obs.model == dyn.DOUBLE_INTEGRATOR:
        return (obs.own.px, obs.own.py)[spec.axis]
    raise DegreeError("boundary rows unsupported for this model")


def _lateral_rate(spec: BarrierSpec, obs: Observation) -> float:
    if obs.model == dyn.FRENET:
        return obs.own.v * math.sin(obs.own.psi)
    return (obs.own.vx, obs.own.vy)[spec.axis]


def _interagent_terms_deg1(spec, obs, neighbor):
    """(b, Lf b, Lg b) for the speed-scaled circle on a scalar-speed model."""
    v = own_speed(obs)
    r = radius(spec, v)
    b = float(neighbor.rel_pos @ neighbor.rel_pos) - r * r
    lf = 2.0 * float(neighbor.rel_pos @ neighbor.rel_vel)
    lg = np.zeros(2)
    lg[0] = -2.0 * r * _radius_derivative(spec, v)
    return b, lf, lg


def _circle_terms_deg2(spec, obs, neighbor, constant_sq, params):
    """(b, Lf b, Lf^2 b, Lg Lf b) for a fixed-radius circle, planar models."""
    rel = neighbor.rel_pos
    relv = neighbor.rel_vel
    b = float(rel @ rel) - constant_sq
    lf = 2.0 * float(rel @ relv)
    lf2 = 2.0 * float(relv @ relv)
    if obs.model == dyn.DOUBLE_INTEGRATOR:
        lglf = -2.0 * rel.copy()
    else:
        # cartesian bicycle: own acceleration vector is
        # (a c - v^2 w s / L, a s + v^2 w c / L)
        s = obs.own
        rate = s.v * s.v / params.wheelbase
        lglf = np.array([
            -2.0 * (rel[0] * s.cos_t + rel[1] * s.sin_t),
            -2.0 * rate * (-rel[0] * s.sin_t + rel[1] * s.cos_t),
        ])
    return b, lf, lf2, lglf


def _boundary_terms(spec, obs, params: dyn.DynamicsParams):
    """(b, Lf b, Lf^2 b, Lg Lf b) for one side of the drivable band."""
    band = obs.band
    if obs.model == dyn.DOUBLE_INTEGRATOR:
        lat = _lateral(spec, obs)
        rate = _lateral_rate(spec, obs)
        lglf = np.zeros(2)
        if spec.side == "upper":
            b, lf = band.hi - lat, -rate
            lglf[spec.axis] = -1.0
        else:
            b, lf = lat - band.lo, rate
            lglf[spec.axis] = 1.0
        return float(b), float(lf), 0.0, lglf

    s = obs.own
    kap = band.kappa
    denom = 1.0 - s.d * kap
    if denom <= dyn.SINGULARITY_EPS:
        raise DomainError("state at curvature singularity")
    cos_psi, sin_psi = math.cos(s.psi), math.sin(s.psi)
    p_dot = s.v * cos_psi / denom
    d_rate = s.v * sin_psi
    vl = s.v / params.wheelbase

    if spec.side == "upper":
        m, m_p, m_pp = band.hi, band.hi_p, band.hi_pp
        b = m - s.d
        lf = m_p * p_dot - d_rate
        lf2 = (kap * p_dot * s.v * cos_psi + m_pp * p_dot * p_dot
               + 2.0 * m_p * kap * p_dot * d_rate / denom)
        g_a = -sin_psi + m_p * cos_psi / denom
        g_w = -s.v * cos_psi * vl - m_p * d_rate * vl / denom
    else:
        m, m_p, m_pp = band.lo, band.lo_p, band.lo_pp
        b = s.d - m
        lf = d_rate - m_p * p_dot
        lf2 = (-kap * p_dot * s.v * cos_psi - m_pp * p_dot * p_dot
               - 2.0 * m_p * kap * p_dot * d_rate / denom)
        g_a = sin_psi - m_p * cos_psi / denom
        g_w = s.v * cos_psi * vl + m_p * d_rate * vl / denom
    return float(b), float(lf), float(lf2), np.array([g_a, g_w])


def _terms(spec, obs, neighbor, params):
    neighbor = _resolve(obs, neighbor)
    _validate_degree(spec, obs.model)
    if spec.kind == ROAD_BOUNDARY:
        return _boundary_terms(spec, obs, params)
    if spec.kind == STATIC_OBSTACLE:
        return _circle_terms_deg2(spec, obs, neighbor, spec.obstacle_margin,
                                  params)
    if spec.rel_degree == 1:
        b, lf, lg = _interagent_terms_deg1(spec, obs, neighbor)
        return b, lf, None, lg
    r0sq = spec.footprint_radius ** 2
    return _circle_terms_deg2(spec, obs, neighbor, r0sq, params)


def barrier_cascade(spec: BarrierSpec, obs: Observation,
                    neighbor: NeighborView | None,
                    alphas: list[ClassK],
                    params: dyn.DynamicsParams) -> list[float]:
    """Auxiliary function values [z_0 .. z_{m-1}] with z_0 = b and
    z_i = z'_{i-1} + alpha_i(z_{i-1}), derivatives taken along the drift."""
    m = spec.rel_degree
    if len(alphas) < m - 1:
        raise DomainError(f"need {m - 1} class-K functions, got {len(alphas)}")
    terms = _terms(spec, obs, neighbor, params)
    b, lf = terms[0], terms[1]
    if not all(math.isfinite(x) for x in (b, lf)):
        raise DomainError("non-finite barrier derivative")
    out = [b]
    if m == 2:
        out.append(lf + alphas[0](b))
    return out


def hocbf_row(spec: BarrierSpec, obs: Observation,
              neighbor: NeighborView | None,
              gains: np.ndarray,
              params: dyn.DynamicsParams,
              n_controls: int = 2, n_slacks: int = 0) -> ConstraintRow:
    """Hard constraint row  G u <= h  for one barrier.

    ``gains`` supplies the linear class-K gains, one per order (m of them),
    all strictly positive.
    """
    gains = np.asarray(gains, dtype=float)
    if gains.size < spec.rel_degree or np.any(gains[:spec.rel_degree] <= 0):
        raise DomainError("need one positive gain per barrier order")
    terms = _terms(spec, obs, neighbor, params)
    g = np.zeros(n_controls + n_slacks)
    if spec.rel_degree == 1:
        b, lf, _, lg = terms
        g[:n_controls] = -lg[:n_controls]
        h = lf + gains[0] * b
        partials = (b,)
    else:
        b, lf, lf2, lglf = terms
        g[:n_controls] = -lglf[:n_controls]
        g1, g2 = float(gains[0]), float(gains[1])
        h = lf2 + (g1 + g2) * lf + g1 * g2 * b
        partials = (lf + g2 * b, lf + g1 * b)
    if not math.isfinite(h) or not np.all(np.isfinite(g)):
        raise DomainError("non-finite constraint row")
    return ConstraintRow(g_coeffs=g, h_rhs=float(h), kind=CBF_HARD,
                         gain_partials=partials)


def clf_row(target_kind: str, obs: Observation, target,
            rate: float, slack_index: int,
            params: dyn.DynamicsParams,
            n_controls: int = 2, n_slacks: int = 1) -> ConstraintRow:
    """Soft tracking row  LfV + LgV u + rate V - e <= 0.

    ``target_kind`` selects the Lyapunov function: scalar "velocity"
    V = (v - v_des)^2, "heading" V = (psi - psi_des)^2, or a planar
    "velocity_vector" with V = 0.5 ||vel - v_des||^2 whose printed
    constraint uses the unhalved quadratic on the right-hand side.
    """
    if rate <= 0.0:
        raise DomainError("CLF rate must be positive")
    g = np.zeros(n_controls + n_slacks)
    s = obs.own

    if target_kind == "velocity":
        err = s.v - float(target)
        g[0] = 2.0 * err
        h = -rate * err * err
        value = err * err
    elif target_kind == "heading":
        if obs.model != dyn.FRENET:
            raise DomainError("heading tracking needs the path model")
        kap = obs.band.kappa if obs.band is not None else 0.0
        denom = 1.0 - s.d * kap
        p_dot = s.v * math.cos(s.psi) / denom
        err = s.psi - float(target)
        g[1] = 2.0 * err * s.v / params.wheelbase
        # drift term LfV = -2 err kappa p_dot moves to the right-hand side
        h = -rate * err * err + 2.0 * err * kap * p_dot
        value = err * err
    elif target_kind == "velocity_vector":
        tgt = np.asarray(target, dtype=float)
        vel = own_velocity(obs)
        errv = vel - tgt
        if obs.model == dyn.DOUBLE_INTEGRATOR:
            g[0], g[1] = errv[0], errv[1]
        elif obs.model == dyn.CARTESIAN:
            rate_w = s.v * s.v / params.wheelbase
            g[0] = errv[0] * s.cos_t + errv[1] * s.sin_t
            g[1] = rate_w * (-errv[0] * s.sin_t + errv[1] * s.cos_t)
        else:
            raise DomainError("velocity_vector tracking is planar only")
        value = float(errv @ errv)
        h = -rate * value
    else:
        raise DomainError(f"unknown CLF target kind {target_kind!r}")

    g[n_controls + slack_index] = -1.0
    return ConstraintRow(g_coeffs=g, h_rhs=float(h), kind=CLF_SOFT,
                         slack_index=slack_index, rate_partial=-value)


def desired_heading_from_lateral_error(e_lat: float, gain: float,
                                       clamp: float) -> float:
    """Linear steering target clamp(gain * e_lat, +-clamp)."""
    return float(min(max(gain * e_lat, -clamp), clamp))


@dataclass(frozen=True)
class SafetyParams:
    """Barrier geometry and penalty constants shared by skills and worlds.

    The parameter cap is sized so that the steepest admissible class-K
    decay per step (cap * dt) still leaves a positive barrier floor over a
    full skill duration; see the headway gates in the skill module.
    """

    footprint_radius: float = 1.7
    speed_gain: float = 0.26
    obstacle_margin: float = 1.0
    lane_half_width: float = 1.75
    penalty: float = 10.0
    phi_floor: float = 0.5
    phi_cap: float = 1.0
    spawn_margin: float = 2.0
    headway_gate: float = 2.0
    lane_change_gate: float = 1.0


@dataclass(frozen=True)
class QPParams:
    """Learnable parameter vector of the per-step program.

    Each entry lives in (floor, cap]; the blocks are the objective
    diagonal and linear weights on the controls, the class-K gains per
    barrier family, the Lyapunov convergence rates and the slack
    penalties.
    """

    h_weights: np.ndarray
    f_weights: np.ndarray
    barrier_gains: np.ndarray
    clf_rates: np.ndarray
    slack_weights: np.ndarray
    floor: float = 0.01
    cap: float = 5.0

    def __post_init__(self):
        for name, block in self.blocks().items():
            arr = np.asarray(block, dtype=float)
            if arr.size and (np.any(arr <= self.floor) or np.any(arr > self.cap)):
                raise DomainError(
                    f"{name} outside ({self.floor}, {self.cap}]: {arr!r}")

    def blocks(self) -> dict:
        return {
            "h_weights": self.h_weights,
            "f_weights": self.f_weights,
            "barrier_gains": self.barrier_gains,
            "clf_rates": self.clf_rates,
            "slack_weights": self.slack_weights,
        }

    def as_flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=float).ravel()
                               for b in self.blocks().values()])

    @staticmethod
    def from_flat(flat: np.ndarray, layout: tuple[int, int, int, int, int],
                  floor: float = 0.01, cap: float = 5.0) -> "QPParams":
        sizes = list(layout)
        parts, k = [], 0
        for n in sizes:
            parts.append(np.asarray(flat[k:k + n], dtype=float))
            k += n
        return QPParams(*parts, floor=floor, cap=cap)
