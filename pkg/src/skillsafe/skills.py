"""Interpretable skills executed through a barrier-constrained program.

A skill is an option: an initiation predicate, a termination set derived
from the observation at initiation, a timeout, a constraint recipe and an
intrinsic shaping reward.  Executing a skill never involves a learned
action head; the control at each step is the argmin of a strictly convex
QP whose hard rows are the barrier constraints for every sensed entity
and whose soft rows pull toward the skill's target.

The road catalog has five skills (cruise, accelerate, yield, lane change
left/right); the planar catalog has four (speed up, slow down, turn
left/right).  Hard-row infeasibility triggers a maximum-braking fallback
and is surfaced as a first-class audited event, because the forward
invariance certificate only covers steps where the program was solved to
optimality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import barriers as bar
from . import dynamics as dyn
from . import qp
from .errors import DomainError, NumericalError
from .observation import AGENT, FROZEN, OBSTACLE, Observation, own_speed, own_velocity

ROAD_CATALOG = "road"
PLANAR_CATALOG = "planar"

SLACK_QUAD = 1e-2   # fixed PD weight on slack variables, not learnable

VIOLATION = "violation"
INFEASIBLE_QP = "infeasible_qp"
FALLBACK_APPLIED = "fallback_applied"


@dataclass(frozen=True)
class SkillSpec:
    skill_id: str
    catalog: str
    t_max: int = 50
    magnitude: float = 0.0            # dv for speed skills, dtheta for turns
    tol_v: float = 0.1
    tol_d: float = 0.1
    cruise_distance: float = 10.0
    heading_gain: float = 0.4
    heading_clamp: float = 0.5
    intrinsic_coeffs: tuple = (0.1, 1.0, 0.5, 0.5)
    progress_bonus: float = 0.0
    safety: bar.SafetyParams = field(default_factory=bar.SafetyParams)

    def __post_init__(self):
        if self.t_max < 1:
            raise DomainError("t_max must be at least 1")
        if any(c < 0 for c in self.intrinsic_coeffs):
            raise DomainError("intrinsic coefficients must be nonnegative")
        if self.skill_id != "cruise" and self.magnitude <= 0:
            raise DomainError("non-cruise skills need a positive magnitude")

    # barrier families activated by this skill's constraint recipe
    def barrier_specs(self) -> dict:
        s = self.safety
        if self.catalog == ROAD_CATALOG:
            return {
                "inter": bar.BarrierSpec(kind=bar.INTER_AGENT, rel_degree=1,
                                         footprint_radius=s.footprint_radius,
                                         speed_gain=s.speed_gain),
                "bound_up": bar.BarrierSpec(kind=bar.ROAD_BOUNDARY,
                                            rel_degree=2, side="upper"),
                "bound_lo": bar.BarrierSpec(kind=bar.ROAD_BOUNDARY,
                                            rel_degree=2, side="lower"),
            }
        return {
            "inter": bar.BarrierSpec(kind=bar.INTER_AGENT, rel_degree=2,
                                     footprint_radius=s.footprint_radius),
            "obstacle": bar.BarrierSpec(kind=bar.STATIC_OBSTACLE, rel_degree=2,
                                        obstacle_margin=s.obstacle_margin),
        }

    def is_lane_change(self) -> bool:
        return self.skill_id in ("lane_change_left", "lane_change_right")

    def param_layout(self) -> tuple[int, int, int, int, int]:
        """(h_weights, f_weights, barrier_gains, clf_rates, slack_weights).

        Road skills reserve capacity for two soft rows (velocity plus a
        heading row) even when the heading row is inactive, so the
        parameter dimension stays fixed per skill.
        """
        if self.catalog == ROAD_CATALOG:
            return (2, 2, 3, 2, 2)
        return (2, 2, 4, 1, 1)


@dataclass
class SkillRuntime:
    spec: SkillSpec
    o_init: Observation
    t_start: int
    v_des: float | None = None
    d_target: float | None = None
    v_vec_des: np.ndarray | None = None
    theta_des: float | None = None
    p_init: float = 0.0

    def elapsed(self, t: int) -> int:
        return t - self.t_start


@dataclass(frozen=True)
class SafetyEvent:
    step: int
    agent: int
    kind: str
    min_barrier_value: float


@dataclass(frozen=True)
class ActResult:
    control: np.ndarray
    events: tuple[SafetyEvent, ...]
    status: str
    solution: qp.QPSolution | None
    build: "QPBuild | None"


ROAD_SKILLS = ("cruise", "accelerate", "yield", "lane_change_left",
               "lane_change_right")
PLANAR_SKILLS = ("speed_up", "slow_down", "turn_left", "turn_right")


def catalog(env_kind: str, t_max: int = 50, dv: float = 1.0,
            dtheta: float = 0.3, intrinsic_coeffs=(0.1, 1.0, 0.5, 0.5),
            progress_bonus: float = 0.0, tol_v: float = 0.1,
            tol_d: float = 0.1, cruise_distance: float = 10.0,
            safety: bar.SafetyParams | None = None) -> list[SkillSpec]:
    safety = safety or bar.SafetyParams()
    common = dict(t_max=t_max, intrinsic_coeffs=tuple(intrinsic_coeffs),
                  progress_bonus=progress_bonus, safety=safety,
                  tol_v=tol_v, tol_d=tol_d, cruise_distance=cruise_distance)
    if env_kind == ROAD_CATALOG:
        mags = {"cruise": 0.0, "accelerate": dv, "yield": dv,
                "lane_change_left": 1.0, "lane_change_right": 1.0}
        return [SkillSpec(skill_id=sid, catalog=ROAD_CATALOG,
                          magnitude=mags[sid], **common)
                for sid in ROAD_SKILLS]
    if env_kind == PLANAR_CATALOG:
        mags = {"speed_up": dv, "slow_down": dv,
                "turn_left": dtheta, "turn_right": dtheta}
        return [SkillSpec(skill_id=sid, catalog=PLANAR_CATALOG,
                          magnitude=mags[sid], **common)
                for sid in PLANAR_SKILLS]
    raise DomainError(f"unknown catalog {env_kind!r}")


def _nearest_entity_barrier(spec: SkillSpec, obs: Observation,
                            ahead_only: bool) -> float:
    """Smallest inter-agent barrier value among sensed entities."""
    worst = math.inf
    s = spec.safety
    v = own_speed(obs)
    r = s.footprint_radius + s.speed_gain * max(v, 0.0)
    for nb in obs.neighbors:
        if nb.kind == OBSTACLE:
            continue
        if ahead_only and nb.rel_pos[0] <= 0.0:
            continue
        worst = min(worst, float(nb.rel_pos @ nb.rel_pos) - r * r)
    return worst


def is_initiable(spec: SkillSpec, obs: Observation) -> bool:
    """Initiation set: geometric existence plus a headway gate.

    Speed-up style skills are only offered with clear headway so a skill
    can never start already riding a barrier; the per-skill class-K decay
    bound then keeps a positive floor for the whole skill duration.
    """
    sid = spec.skill_id
    if sid == "cruise" or sid.startswith("turn"):
        return True
    if sid == "accelerate":
        if obs.own.v + spec.magnitude > obs.speed_cap:
            return False
        return _nearest_entity_barrier(spec, obs, ahead_only=True) \
            >= spec.safety.headway_gate
    if sid == "yield":
        return obs.own.v - spec.magnitude >= 0.0
    if sid in ("lane_change_left", "lane_change_right"):
        lane_ok = obs.left_lane if sid == "lane_change_left" else obs.right_lane
        if not lane_ok:
            return False
        return _nearest_entity_barrier(spec, obs, ahead_only=False) \
            >= spec.safety.lane_change_gate
    if sid == "speed_up":
        if own_speed(obs) + spec.magnitude > obs.speed_cap:
            return False
        return _nearest_entity_barrier(spec, obs, ahead_only=False) \
            >= 0.25 * spec.safety.headway_gate
    if sid == "slow_down":
        return own_speed(obs) - spec.magnitude >= 0.0
    raise DomainError(f"unknown skill {sid!r}")


def _planar_direction(obs: Observation) -> np.ndarray:
    vel = own_velocity(obs)
    speed = float(np.linalg.norm(vel))
    if speed > 0.3:
        return vel / speed
    g = obs.goal.direction
    norm = float(np.linalg.norm(g))
    return g / norm if norm > 1e-9 else np.array([1.0, 0.0])


def initiate(spec: SkillSpec, obs: Observation, t: int) -> SkillRuntime:
    rt = SkillRuntime(spec=spec, o_init=obs, t_start=t)
    sid = spec.skill_id
    if spec.catalog == ROAD_CATALOG:
        v0 = obs.own.v
        rt.p_init = obs.own.p
        if sid == "cruise":
            rt.v_des = v0
        elif sid == "accelerate":
            rt.v_des = v0 + spec.magnitude
        elif sid == "yield":
            rt.v_des = v0 - spec.magnitude
        else:
            shift = obs.lane_width if sid == "lane_change_left" else -obs.lane_width
            rt.d_target = obs.lane_center + shift
            rt.v_des = v0
        return rt
    vel = own_velocity(obs)
    direction = _planar_direction(obs)
    if sid == "speed_up":
        rt.v_vec_des = vel + spec.magnitude * direction
    elif sid == "slow_down":
        rt.v_vec_des = vel - spec.magnitude * direction
    else:
        theta0 = math.atan2(direction[1], direction[0])
        dth = spec.magnitude if sid == "turn_left" else -spec.magnitude
        rt.theta_des = theta0 + dth
        v_mag = max(float(np.linalg.norm(vel)), 1.0)
        rt.v_vec_des = v_mag * np.array([math.cos(rt.theta_des),
                                         math.sin(rt.theta_des)])
    return rt


def terminate(spec: SkillSpec, runtime: SkillRuntime, obs: Observation,
              t: int) -> int:
    if t - runtime.t_start >= spec.t_max:
        return 1
    sid = spec.skill_id
    if spec.catalog == ROAD_CATALOG:
        if sid == "cruise":
            return int(obs.own.p - runtime.p_init >= spec.cruise_distance)
        if sid in ("accelerate", "yield"):
            return int(abs(obs.own.v - runtime.v_des) <= spec.tol_v)
        return int(abs(obs.own.d - runtime.d_target) <= spec.tol_d)
    err = own_velocity(obs) - runtime.v_vec_des
    return int(float(np.linalg.norm(err)) <= spec.tol_v)


@dataclass(frozen=True)
class QPBuild:
    qp_spec: qp.QPSpec
    n_controls: int
    hard_rows: int
    min_barrier: float
    # pathwise-chain metadata: (block, block_index, target, coefficient)
    # where target is ("Hdiag", i), ("F", i) or ("h", row)
    assembly: tuple = ()


def _heading_target(spec: SkillSpec, runtime: SkillRuntime,
                    obs: Observation) -> float:
    target_d = runtime.d_target if runtime.d_target is not None \
        else obs.lane_center
    err = target_d - obs.own.d
    return bar.desired_heading_from_lateral_error(err, spec.heading_gain,
                                                  spec.heading_clamp)


def _lane_keep_active(spec: SkillSpec, obs: Observation) -> bool:
    """Speed skills regulate heading only outside a centered deadband."""
    if spec.is_lane_change():
        return True
    return (abs(obs.own.d - obs.lane_center) > 0.3
            or abs(obs.own.psi) > 0.1)


def build_qp(spec: SkillSpec, runtime: SkillRuntime, obs: Observation,
             params: bar.QPParams, dyn_params: dyn.DynamicsParams) -> QPBuild:
    """Assemble the per-step program for one agent under one skill.

    Decision vector is [controls; one slack per soft row].  Hard rows are
    one barrier row per sensed entity plus the two drivable-band rows on
    the road; soft rows track the skill targets.
    """
    bspecs = spec.barrier_specs()
    n_u = 2
    with_heading = spec.catalog == ROAD_CATALOG \
        and _lane_keep_active(spec, obs)
    n_slack = (2 if with_heading else 1) if spec.catalog == ROAD_CATALOG else 1
    n_var = n_u + n_slack
    rows: list[bar.ConstraintRow] = []
    assembly: list[tuple] = []
    min_b = math.inf

    gains = params.barrier_gains
    if spec.catalog == ROAD_CATALOG:
        gain_slices = {"inter": (gains[0:1], (0,)),
                       "bound": (gains[1:3], (1, 2))}
    else:
        gain_slices = {"inter": (gains[0:2], (0, 1)),
                       "obstacle": (gains[2:4], (2, 3))}

    for nb in obs.neighbors:
        if nb.kind in (AGENT, FROZEN):
            key, bspec = "inter", bspecs["inter"]
        elif nb.kind == OBSTACLE and spec.catalog == PLANAR_CATALOG:
            key, bspec = "obstacle", bspecs["obstacle"]
        else:
            continue
        g_vals, g_idx = gain_slices[key]
        row = bar.hocbf_row(bspec, obs, nb, g_vals, dyn_params,
                            n_controls=n_u, n_slacks=n_slack)
        min_b = min(min_b, bar.eval_barrier(bspec, obs, nb))
        for gi, part in zip(g_idx, row.gain_partials):
            assembly.append(("barrier_gains", gi, ("h", len(rows)), part))
        rows.append(row)

    if spec.catalog == ROAD_CATALOG:
        g_vals, g_idx = gain_slices["bound"]
        for bkey in ("bound_up", "bound_lo"):
            row = bar.hocbf_row(bspecs[bkey], obs, None, g_vals, dyn_params,
                                n_controls=n_u, n_slacks=n_slack)
            min_b = min(min_b, bar.eval_barrier(bspecs[bkey], obs, None))
            for gi, part in zip(g_idx, row.gain_partials):
                assembly.append(("barrier_gains", gi, ("h", len(rows)), part))
            rows.append(row)

    hard_rows = len(rows)

    # soft rows: one velocity target, plus a heading row that tracks the
    # lane-change target or recenters the lane outside the deadband
    if spec.catalog == ROAD_CATALOG:
        row = bar.clf_row("velocity", obs, runtime.v_des, params.clf_rates[0],
                          slack_index=0, params=dyn_params,
                          n_controls=n_u, n_slacks=n_slack)
        assembly.append(("clf_rates", 0, ("h", len(rows)), row.rate_partial))
        rows.append(row)
        if with_heading:
            psi_des = _heading_target(spec, runtime, obs)
            row = bar.clf_row("heading", obs, psi_des, params.clf_rates[1],
                              slack_index=1, params=dyn_params,
                              n_controls=n_u, n_slacks=n_slack)
            assembly.append(("clf_rates", 1, ("h", len(rows)), row.rate_partial))
            rows.append(row)
    else:
        row = bar.clf_row("velocity_vector", obs, runtime.v_vec_des,
                          params.clf_rates[0], slack_index=0,
                          params=dyn_params, n_controls=n_u, n_slacks=n_slack)
        assembly.append(("clf_rates", 0, ("h", len(rows)), row.rate_partial))
        rows.append(row)

    # centered linear weights: the admissible box maps onto both signs so
    # the untrained midpoint exerts no control bias
    f_center = 0.5 * (params.floor + params.cap)
    H = np.diag(np.concatenate([params.h_weights,
                                np.full(n_slack, SLACK_QUAD)]))
    F = np.concatenate([params.f_weights - f_center,
                        params.slack_weights[:n_slack]])
    for i in range(n_u):
        assembly.append(("h_weights", i, ("Hdiag", i), 1.0))
        assembly.append(("f_weights", i, ("F", i), 1.0))
    for j in range(n_slack):
        assembly.append(("slack_weights", j, ("F", n_u + j), 1.0))

    G = np.array([r.g_coeffs for r in rows]) if rows else np.zeros((0, n_var))
    h = np.array([r.h_rhs for r in rows]) if rows else np.zeros(0)
    lo, hi = dyn.control_bounds(obs.model, dyn_params)
    lb = np.concatenate([lo, np.zeros(n_slack)])
    ub = np.concatenate([hi, np.full(n_slack, np.inf)])
    spec_qp = qp.QPSpec.build(H=H, F=F, G=G, h=h, lb=lb, ub=ub)
    return QPBuild(qp_spec=spec_qp, n_controls=n_u, hard_rows=hard_rows,
                   min_barrier=min_b, assembly=tuple(assembly))


def act(spec: SkillSpec, runtime: SkillRuntime, obs: Observation,
        params: bar.QPParams, dyn_params: dyn.DynamicsParams,
        step: int = 0, agent_id: int = 0) -> ActResult:
    """Deterministic low-level action: solve the program, fall back to
    maximum braking when the hard rows admit no control."""
    build = build_qp(spec, runtime, obs, params, dyn_params)
    try:
        sol = qp.solve(build.qp_spec)
    except NumericalError as exc:
        event = SafetyEvent(step=step, agent=agent_id, kind=FALLBACK_APPLIED,
                            min_barrier_value=build.min_barrier)
        exc.event = event
        raise
    if sol.status == qp.OPTIMAL:
        lo, hi = dyn.control_bounds(obs.model, dyn_params)
        control = np.clip(sol.primal[:build.n_controls], lo, hi)
        return ActResult(control=control, events=(), status=sol.status,
                         solution=sol, build=build)
    control = dyn.fallback_control(obs.model, obs.own, dyn_params)
    events = (SafetyEvent(step=step, agent=agent_id, kind=INFEASIBLE_QP,
                          min_barrier_value=build.min_barrier),
              SafetyEvent(step=step, agent=agent_id, kind=FALLBACK_APPLIED,
                          min_barrier_value=build.min_barrier))
    return ActResult(control=control, events=events, status=sol.status,
                     solution=sol, build=build)


def intrinsic_reward(spec: SkillSpec, runtime: SkillRuntime, state,
                     control: np.ndarray, obs: Observation) -> float:
    """Shaping signal: penalties on control effort, speed and heading
    tracking error, and lateral offset (road) or goal-direction error
    (planar).  A forward-progress bonus is available but defaults off."""
    c1, c2, c3, c4 = spec.intrinsic_coeffs
    u = np.asarray(control, dtype=float)
    r = -c1 * float(u @ u)

    if spec.catalog == ROAD_CATALOG:
        v_des = runtime.v_des if runtime.v_des is not None else state.v
        verr = state.v - v_des
        if abs(v_des) < 0.1:
            r -= c2 * verr * verr
        else:
            r -= c2 * (verr / v_des) ** 2
        psi_des = 0.0
        if runtime.d_target is not None:
            psi_des = _heading_target(spec, runtime, obs)
        r -= c3 * ((state.psi - psi_des) / math.pi) ** 2
        r -= c4 * state.d * state.d
        if spec.progress_bonus:
            r += spec.progress_bonus * max(state.v * math.cos(state.psi), 0.0)
        return float(r)

    vel = own_velocity(obs)
    tgt = runtime.v_vec_des
    tnorm = float(tgt @ tgt)
    verr = float((vel - tgt) @ (vel - tgt))
    r -= c2 * (verr / tnorm if tnorm >= 0.01 else verr)
    speed = float(np.linalg.norm(vel))
    if runtime.theta_des is not None and speed > 0.1:
        dth = math.atan2(vel[1], vel[0]) - runtime.theta_des
        dth = (dth + math.pi) % (2 * math.pi) - math.pi
        r -= c3 * (dth / math.pi) ** 2
    gdir = obs.goal.direction
    gn = float(np.linalg.norm(gdir))
    if speed > 0.1 and gn > 1e-9:
        ang = math.atan2(vel[1], vel[0]) - math.atan2(gdir[1], gdir[0])
        ang = (ang + math.pi) % (2 * math.pi) - math.pi
        r -= c4 * (ang / math.pi) ** 2
    if spec.progress_bonus and gn > 1e-9 and speed > 0:
        r += spec.progress_bonus * max(float(vel @ gdir) / gn, 0.0)
    return float(r)
