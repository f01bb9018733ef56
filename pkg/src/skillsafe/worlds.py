"""Multi-agent environments: a merge road and two planar arenas.

The merge world runs path-coordinate bicycles on a 200 m main road
(single 3.5 m lane) with a 100 m on-ramp whose lane joins at 120 m and
closes smoothly over a 30 m conflict wedge.  Both routes share the main
arc coordinate; the ramp is the band d < -lane_width/2.  The wedge is
expressed purely through the drivable band: the ramp agent's lower bound
rises smoothly across the conflict zone, so the boundary barrier rows
force a stop-or-merge decision without any bespoke logic.

The planar worlds (target, spread) run double integrators or cartesian
bicycles in an open arena with static circular obstacles.

Crashed road agents freeze in place for ``obstacle_linger`` steps as
impassable markers before removal; colliding with a marker is a crash.
Terminated agents are respawned at the route entry as soon as the entry
is clear when continuous flow is enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import barriers as bar
from . import dynamics as dyn
from .errors import DeadAgentError, DomainError, SpawnError
from .observation import (AGENT, FROZEN, OBSTACLE, BandGeometry, GoalView,
                          NeighborView, Observation)

MERGE = "merge"
TARGET = "target"
SPREAD = "spread"

SUCCESS = "success"
CRASH = "crash"
OUT_OF_ROAD = "out_of_road"
TIMEOUT = "timeout"
NONE = "none"


@dataclass(frozen=True)
class WorldConfig:
    name: str = MERGE
    num_agents: int = 4
    dt: float = 0.1
    max_steps: int = 400
    sensing_radius: float = 30.0
    lane_width: float = 3.5
    respawn: bool = True
    obstacle_linger: int = 10
    spawn_attempts: int = 50
    arena_half: float = 6.0
    obstacles: tuple = ((1.5, 0.8), (-1.2, -1.0))
    goal_radius: float = 0.3
    w_time: float = 0.1
    w_energy: float = 0.01
    w_progress: float = 1.0
    safety: bar.SafetyParams = field(default_factory=bar.SafetyParams)
    dynamics: dyn.DynamicsParams = field(default_factory=dyn.road_params)

    def is_road(self) -> bool:
        return self.name == MERGE


class MergeGeometry:
    """Single main lane plus an on-ramp lane closing over a smooth wedge."""

    def __init__(self, lane_width: float = 3.5):
        self.lane_width = lane_width
        self.half = lane_width / 2.0
        self.main_length = 200.0
        self.ramp_start = 20.0
        self.merge_point = 120.0
        self.conflict_len = 30.0
        self.ramp_end = self.merge_point + self.conflict_len
        self.ramp_center = -lane_width
        self.lc_window = (self.merge_point, self.ramp_end - 2.0)

    def _wedge(self, p: float):
        """Smoothstep rise of the ramp's lower bound with derivatives."""
        t = (p - self.merge_point) / self.conflict_len
        if t <= 0.0:
            return 0.0, 0.0, 0.0
        if t >= 1.0:
            return 1.0, 0.0, 0.0
        s = 3 * t * t - 2 * t ** 3
        sp = (6 * t - 6 * t * t) / self.conflict_len
        spp = (6 - 12 * t) / self.conflict_len ** 2
        return s, sp, spp

    def band(self, route: str, p: float) -> BandGeometry:
        if route == "main":
            return BandGeometry(lo=-self.half, hi=self.half)
        lo0 = self.ramp_center - self.half
        rise = self.lane_width
        s, sp, spp = self._wedge(p)
        hi = self.half if p >= self.merge_point else -self.half
        return BandGeometry(lo=lo0 + rise * s, hi=hi,
                            lo_p=rise * sp, lo_pp=rise * spp)

    def lane_center(self, route: str, p: float, d: float) -> float:
        if route == "main" or d > -self.half:
            return 0.0
        return self.ramp_center

    def lane_flags(self, route: str, p: float, d: float):
        if route == "ramp" and d <= -self.half:
            lo, hi = self.lc_window
            return (lo <= p <= hi), False
        return False, False

    def spawn_slots(self, route: str) -> list[float]:
        if route == "main":
            return [10.0, 45.0, 80.0]
        return [30.0, 65.0]

    def entry_point(self, route: str) -> float:
        return 6.0 if route == "main" else 24.0


class PlanarGeometry:
    def __init__(self, arena_half: float, obstacles: tuple):
        self.arena_half = arena_half
        self.obstacles = [np.asarray(o, dtype=float) for o in obstacles]


@dataclass
class Agent:
    agent_id: int
    slot: int
    route: str
    state: object
    goal_xy: np.ndarray | None = None
    spawn_step: int = 0
    steps: int = 0
    energy: float = 0.0
    progress: float = 0.0


@dataclass
class Marker:
    pos: np.ndarray
    ttl: int
    source_id: int


@dataclass
class AgentResult:
    agent_id: int
    outcome: str
    steps: int
    energy: float


@dataclass
class Census:
    spawned: int = 0
    succeeded: int = 0
    crashed: int = 0
    out_of_road: int = 0
    timed_out: int = 0

    def alive_consistent(self, alive: int) -> bool:
        return self.spawned == (alive + self.succeeded + self.crashed
                                + self.out_of_road + self.timed_out)


@dataclass
class StepEvents:
    events: dict = field(default_factory=dict)

    def of(self, agent_id: int) -> str:
        return self.events.get(agent_id, NONE)

    def any_failure(self) -> bool:
        return any(e in (CRASH, OUT_OF_ROAD) for e in self.events.values())


@dataclass
class WorldState:
    cfg: WorldConfig
    geom: object
    t: int
    agents: dict
    markers: list
    census: Census
    finished: list
    rng: np.random.Generator
    next_id: int = 0
    free_slots: list = field(default_factory=list)
    spawn_queue: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    claimed: set = field(default_factory=set)
    clamp_events: int = 0


def _inter_spec(cfg: WorldConfig) -> bar.BarrierSpec:
    if cfg.is_road():
        return bar.BarrierSpec(kind=bar.INTER_AGENT, rel_degree=1,
                               footprint_radius=cfg.safety.footprint_radius,
                               speed_gain=cfg.safety.speed_gain)
    return bar.BarrierSpec(kind=bar.INTER_AGENT, rel_degree=2,
                           footprint_radius=cfg.safety.footprint_radius)


def _positions(cfg: WorldConfig, agent: Agent) -> np.ndarray:
    s = agent.state
    if cfg.is_road():
        return np.array([s.p, s.d])
    return np.array([s.px, s.py])


def _velocity(cfg: WorldConfig, agent: Agent) -> np.ndarray:
    s = agent.state
    if cfg.is_road():
        return np.array([s.v * math.cos(s.psi), s.v * math.sin(s.psi)])
    if cfg.dynamics.model == dyn.DOUBLE_INTEGRATOR:
        return np.array([s.vx, s.vy])
    return np.array([s.v * s.cos_t, s.v * s.sin_t])


def _speed(cfg: WorldConfig, agent: Agent) -> float:
    return float(np.linalg.norm(_velocity(cfg, agent)))


def pair_barrier(world: WorldState, i: int, j: int) -> float:
    """b_i^j evaluated from the joint state (i's speed envelope)."""
    cfg = world.cfg
    a, b_ = world.agents[i], world.agents[j]
    rel = _positions(cfg, b_) - _positions(cfg, a)
    spec = _inter_spec(cfg)
    v = a.state.v if cfg.is_road() else _speed(cfg, a)
    return float(rel @ rel) - bar.radius(spec, v) ** 2


def _marker_barrier(world: WorldState, agent: Agent, marker: Marker) -> float:
    cfg = world.cfg
    rel = marker.pos - _positions(cfg, agent)
    spec = _inter_spec(cfg)
    v = agent.state.v if cfg.is_road() else _speed(cfg, agent)
    return float(rel @ rel) - bar.radius(spec, v) ** 2


def _obstacle_barrier(cfg: WorldConfig, agent: Agent, obst: np.ndarray) -> float:
    rel = obst - _positions(cfg, agent)
    return float(rel @ rel) - cfg.safety.obstacle_margin


def agent_barriers(world: WorldState, i: int) -> list[float]:
    """Every barrier value relevant to agent i at the current state."""
    cfg = world.cfg
    a = world.agents[i]
    vals = []
    for j, other in world.agents.items():
        if j != i:
            vals.append(pair_barrier(world, i, j))
    for mk in world.markers:
        vals.append(_marker_barrier(world, a, mk))
    if cfg.is_road():
        band = world.geom.band(a.route, a.state.p)
        vals.append(band.hi - a.state.d)
        vals.append(a.state.d - band.lo)
    else:
        for ob in world.geom.obstacles:
            vals.append(_obstacle_barrier(cfg, a, ob))
    return vals


def min_barrier(world: WorldState) -> float:
    vals = [v for i in world.agents for v in agent_barriers(world, i)]
    return min(vals) if vals else math.inf


def _spawn_clear(world: WorldState, candidate: Agent, margin: float) -> bool:
    cfg = world.cfg
    spec = _inter_spec(cfg)
    cand_pos = _positions(cfg, candidate)
    cand_v = candidate.state.v if cfg.is_road() else _speed(cfg, candidate)
    r_cand = bar.radius(spec, cand_v)
    for other in world.agents.values():
        rel = _positions(cfg, other) - cand_pos
        sq = float(rel @ rel)
        v_other = other.state.v if cfg.is_road() else _speed(cfg, other)
        if sq - bar.radius(spec, cand_v) ** 2 < margin:
            return False
        if sq - bar.radius(spec, v_other) ** 2 < margin:
            return False
    for mk in world.markers:
        rel = mk.pos - cand_pos
        if float(rel @ rel) - r_cand ** 2 < margin:
            return False
    if not cfg.is_road():
        for ob in world.geom.obstacles:
            if _obstacle_barrier(cfg, candidate, ob) < margin:
                return False
    return True


def _road_spawn_state(world: WorldState, route: str, p: float):
    v = float(world.rng.uniform(2.5, 3.5))
    d = 0.0 if route == "main" else world.geom.ramp_center
    return dyn.BicycleFrenetState(p=p, d=d, psi=0.0, v=v)


def _planar_spawn_state(world: WorldState):
    cfg = world.cfg
    half = world.geom.arena_half
    pos = world.rng.uniform(-half, half, size=2)
    if cfg.dynamics.model == dyn.DOUBLE_INTEGRATOR:
        return dyn.DoubleIntegratorState(pos[0], pos[1], 0.0, 0.0)
    ang = float(world.rng.uniform(-math.pi, math.pi))
    return dyn.BicycleCartesianState(pos[0], pos[1], math.cos(ang),
                                     math.sin(ang), 0.0)


def _planar_goal(world: WorldState, pos: np.ndarray) -> np.ndarray:
    half = world.geom.arena_half
    for _ in range(world.cfg.spawn_attempts):
        g = world.rng.uniform(-half, half, size=2)
        if np.linalg.norm(g - pos) < 2.0:
            continue
        if all(np.linalg.norm(g - ob) ** 2 >= world.cfg.safety.obstacle_margin
               for ob in world.geom.obstacles):
            return g
    raise SpawnError("no valid goal placement")


def make_world(cfg: WorldConfig, seed: int | np.random.Generator = 0) -> WorldState:
    """Build the initial world; every spawned agent starts with all of its
    barriers at or above the configured spawn margin."""
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    if cfg.is_road():
        geom = MergeGeometry(cfg.lane_width)
    else:
        geom = PlanarGeometry(cfg.arena_half, cfg.obstacles)
    world = WorldState(cfg=cfg, geom=geom, t=0, agents={}, markers=[],
                       census=Census(), finished=[], rng=rng)

    margin = cfg.safety.spawn_margin
    if cfg.is_road():
        routes = [("main", "ramp")[k % 2] for k in range(cfg.num_agents)]
        slot_iters = {"main": iter(geom.spawn_slots("main")),
                      "ramp": iter(geom.spawn_slots("ramp"))}
        for k, route in enumerate(routes):
            placed = False
            for p in slot_iters[route]:
                cand = Agent(agent_id=world.next_id, slot=k, route=route,
                             state=_road_spawn_state(world, route, p))
                if _spawn_clear(world, cand, margin):
                    world.agents[cand.agent_id] = cand
                    world.next_id += 1
                    world.census.spawned += 1
                    placed = True
                    break
            if not placed:
                raise SpawnError(f"no free spawn slot for route {route!r}")
    else:
        if cfg.name == SPREAD:
            anchor = np.zeros(2)
            world.goals = [_planar_goal(world, anchor)
                           for _ in range(cfg.num_agents)]
        for k in range(cfg.num_agents):
            for attempt in range(cfg.spawn_attempts + 1):
                if attempt == cfg.spawn_attempts:
                    raise SpawnError("planar placement attempts exhausted")
                cand = Agent(agent_id=world.next_id, slot=k, route="planar",
                             state=_planar_spawn_state(world))
                if _spawn_clear(world, cand, margin):
                    break
            if cfg.name == TARGET:
                cand.goal_xy = _planar_goal(world, _positions(cfg, cand))
            world.agents[cand.agent_id] = cand
            world.next_id += 1
            world.census.spawned += 1
    return world


def observe(world: WorldState, agent_id: int) -> Observation:
    cfg = world.cfg
    if agent_id not in world.agents:
        raise DeadAgentError(f"agent {agent_id} is not alive")
    me = world.agents[agent_id]
    my_pos = _positions(cfg, me)
    my_vel = _velocity(cfg, me)

    entries = []
    for j, other in world.agents.items():
        if j == agent_id:
            continue
        rel = _positions(cfg, other) - my_pos
        dist = float(np.linalg.norm(rel))
        if dist <= cfg.sensing_radius:
            entries.append(NeighborView(
                ref_id=j, kind=AGENT, rel_pos=rel,
                rel_vel=_velocity(cfg, other) - my_vel, distance=dist,
                speed=other.state.v if cfg.is_road() else _speed(cfg, other)))
    for mi, mk in enumerate(world.markers):
        rel = mk.pos - my_pos
        dist = float(np.linalg.norm(rel))
        if dist <= cfg.sensing_radius:
            entries.append(NeighborView(ref_id=-(mi + 1), kind=FROZEN,
                                        rel_pos=rel, rel_vel=-my_vel,
                                        distance=dist))
    if not cfg.is_road():
        for oi, ob in enumerate(world.geom.obstacles):
            rel = ob - my_pos
            dist = float(np.linalg.norm(rel))
            if dist <= cfg.sensing_radius:
                entries.append(NeighborView(ref_id=-1000 - oi, kind=OBSTACLE,
                                            rel_pos=rel, rel_vel=-my_vel,
                                            distance=dist))
    entries.sort(key=lambda nb: (nb.distance, nb.ref_id))

    if cfg.is_road():
        band = world.geom.band(me.route, me.state.p)
        left, right = world.geom.lane_flags(me.route, me.state.p, me.state.d)
        center = world.geom.lane_center(me.route, me.state.p, me.state.d)
        goal = GoalView(distance=world.geom.main_length - me.state.p,
                        direction=np.array([1.0, 0.0]))
        return Observation(model=cfg.dynamics.model, own=me.state,
                           neighbors=tuple(entries), goal=goal, band=band,
                           lane_width=cfg.lane_width,
                           sensing_radius=cfg.sensing_radius,
                           speed_cap=cfg.dynamics.v_max,
                           left_lane=left, right_lane=right,
                           lane_center=center)
    goal_xy = _goal_of(world, me)
    rel_goal = goal_xy - my_pos
    return Observation(model=cfg.dynamics.model, own=me.state,
                       neighbors=tuple(entries),
                       goal=GoalView(distance=float(np.linalg.norm(rel_goal)),
                                     direction=rel_goal),
                       band=None, lane_width=cfg.lane_width,
                       sensing_radius=cfg.sensing_radius,
                       speed_cap=cfg.dynamics.v_max)


def _goal_of(world: WorldState, agent: Agent) -> np.ndarray:
    if world.cfg.name == TARGET:
        return agent.goal_xy
    best, best_d = None, math.inf
    for gi, g in enumerate(world.goals):
        if gi in world.claimed:
            continue
        d = float(np.linalg.norm(g - _positions(world.cfg, agent)))
        if d < best_d:
            best, best_d = gi, d
    if best is None:
        return _positions(world.cfg, agent)
    return world.goals[best]


def indicator(x: float) -> int:
    """1 iff x < 0."""
    return 1 if x < 0 else 0


def _progress_rate(cfg: WorldConfig, world: WorldState, agent: Agent) -> float:
    if cfg.is_road():
        s = agent.state
        band = world.geom.band(agent.route, s.p)
        denom = 1.0 - s.d * band.kappa
        return s.v * math.cos(s.psi) / denom
    vel = _velocity(cfg, agent)
    goal = _goal_of(world, agent) - _positions(cfg, agent)
    norm = float(np.linalg.norm(goal))
    if norm < 1e-9:
        return 0.0
    return float(vel @ goal) / norm


def stage_cost(world: WorldState, joint_controls: dict) -> float:
    """Sum over alive agents of w_t + w_e ||a||^2 - w_p * progress."""
    cfg = world.cfg
    total = 0.0
    for i, agent in world.agents.items():
        u = np.asarray(joint_controls[i], dtype=float)
        total += (cfg.w_time + cfg.w_energy * float(u @ u)
                  - cfg.w_progress * _progress_rate(cfg, world, agent) * cfg.dt)
    return total


def per_agent_extrinsic(world: WorldState, joint_controls: dict) -> dict:
    """Per-agent share of the extrinsic reward; sums to the joint value."""
    cfg = world.cfg
    pen = cfg.safety.penalty
    out = {}
    for i, agent in world.agents.items():
        u = np.asarray(joint_controls[i], dtype=float)
        cost = (cfg.w_time + cfg.w_energy * float(u @ u)
                - cfg.w_progress * _progress_rate(cfg, world, agent) * cfg.dt)
        r = -cost
        for b in agent_barriers(world, i):
            if indicator(b):
                r += pen * b
        out[i] = r
    return out


def extrinsic_reward(world: WorldState, joint_controls: dict) -> float:
    return float(sum(per_agent_extrinsic(world, joint_controls).values()))


def _check_terminal(world: WorldState, agent: Agent) -> str:
    cfg = world.cfg
    vals = agent_barriers(world, agent.agent_id)
    if cfg.is_road():
        n_inter = len(vals) - 2
        if any(v < 0 for v in vals[:n_inter]):
            return CRASH
        band = world.geom.band(agent.route, agent.state.p)
        if agent.state.d > band.hi or agent.state.d < band.lo:
            return OUT_OF_ROAD
        if agent.state.p >= world.geom.main_length:
            return SUCCESS
        return NONE
    if any(v < 0 for v in vals):
        return CRASH
    goal = _goal_of(world, agent)
    if float(np.linalg.norm(goal - _positions(cfg, agent))) <= cfg.goal_radius:
        if cfg.name == SPREAD:
            for gi, g in enumerate(world.goals):
                if gi not in world.claimed and np.array_equal(g, goal):
                    world.claimed.add(gi)
                    break
        return SUCCESS
    return NONE


def _remove(world: WorldState, agent_id: int, outcome: str) -> None:
    agent = world.agents.pop(agent_id)
    world.finished.append(AgentResult(agent_id=agent_id, outcome=outcome,
                                      steps=agent.steps, energy=agent.energy))
    world.free_slots.append(agent.slot)
    if outcome == SUCCESS:
        world.census.succeeded += 1
    elif outcome == CRASH:
        world.census.crashed += 1
        if world.cfg.is_road():
            world.markers.append(Marker(pos=_positions(world.cfg, agent),
                                        ttl=world.cfg.obstacle_linger,
                                        source_id=agent_id))
    elif outcome == OUT_OF_ROAD:
        world.census.out_of_road += 1
    else:
        world.census.timed_out += 1
    if world.cfg.respawn:
        world.spawn_queue.append(agent.route)


def _try_respawn(world: WorldState) -> None:
    cfg = world.cfg
    still_waiting = []
    for route in world.spawn_queue:
        cand_state = (_road_spawn_state(world, route,
                                        world.geom.entry_point(route))
                      if cfg.is_road() else _planar_spawn_state(world))
        slot = world.free_slots[0] if world.free_slots else len(world.agents)
        cand = Agent(agent_id=world.next_id, slot=slot, route=route,
                     state=cand_state, spawn_step=world.t)
        if _spawn_clear(world, cand, cfg.safety.spawn_margin):
            if not cfg.is_road() and cfg.name == TARGET:
                cand.goal_xy = _planar_goal(world, _positions(cfg, cand))
            if world.free_slots:
                world.free_slots.pop(0)
            world.agents[cand.agent_id] = cand
            world.next_id += 1
            world.census.spawned += 1
        else:
            still_waiting.append(route)
    world.spawn_queue = still_waiting


def step_world(world: WorldState, joint_controls: dict,
               dt: float | None = None) -> tuple:
    """Advance all dynamics one step and resolve the agent lifecycle."""
    cfg = world.cfg
    if dt is not None and dt != cfg.dynamics.dt:
        raise DomainError("dt must match the dynamics configuration")
    missing = set(world.agents) - set(joint_controls)
    if missing:
        raise DomainError(f"missing controls for agents {sorted(missing)}")

    for i, agent in world.agents.items():
        u = np.asarray(joint_controls[i], dtype=float)
        before = agent.state
        agent.state, clamped = dyn.step_with_info(cfg.dynamics.model, before,
                                                  u, cfg.dynamics)
        world.clamp_events += int(clamped)
        agent.steps += 1
        agent.energy += float(u @ u) * cfg.dt
        if cfg.is_road():
            agent.progress += agent.state.p - before.p

    events = StepEvents()
    for i in list(world.agents):
        outcome = _check_terminal(world, world.agents[i])
        if outcome != NONE:
            events.events[i] = outcome
    for i, outcome in events.events.items():
        _remove(world, i, outcome)

    world.markers = [replace(mk, ttl=mk.ttl - 1) for mk in world.markers
                     if mk.ttl > 1]

    world.t += 1
    if world.t >= cfg.max_steps:
        for i in list(world.agents):
            events.events[i] = TIMEOUT
            _remove(world, i, TIMEOUT)
    elif cfg.respawn:
        _try_respawn(world)

    assert world.census.alive_consistent(len(world.agents))
    return world, events


@dataclass
class EpisodeLog:
    spawned: int = 0
    results: list = field(default_factory=list)
    steps: int = 0
    min_barrier: float = math.inf
    violations_at_optimal: int = 0
    infeasible: int = 0
    fallbacks: int = 0
    clamp_events: int = 0
    reward_total: float = 0.0


def metrics(episode_log) -> dict:
    """Success rate plus success-weighted time and energy.

    With zero successes the raw averages are reported and flagged
    unweighted instead of dividing by zero.
    """
    logs = episode_log if isinstance(episode_log, (list, tuple)) \
        else [episode_log]
    spawned = sum(l.spawned for l in logs)
    results = [r for l in logs for r in l.results]
    if spawned == 0 or not results:
        return {"success_rate": 0.0, "sw_time": 0.0, "sw_energy": 0.0,
                "weighted": False}
    succ = sum(1 for r in results if r.outcome == SUCCESS)
    rate = succ / spawned
    mean_time = sum(r.steps for r in results) / len(results)
    mean_energy = sum(r.energy for r in results) / len(results)
    if succ == 0:
        return {"success_rate": 0.0, "sw_time": mean_time,
                "sw_energy": mean_energy, "weighted": False}
    return {"success_rate": rate, "sw_time": mean_time / rate,
            "sw_energy": mean_energy / rate, "weighted": True}
