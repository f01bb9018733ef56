"""Episode driver: skills, per-step programs and the world lifecycle.

One function runs a full episode under pluggable skill-selection and
parameter-provider callables, collecting everything the learners and the
safety audits need: skill segments, per-step low-level records, safety
events and barrier minima.  Grouping is expressed over agent slots so
that respawned agents inherit a stable group membership.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import skills as sk
from . import smdp
from . import worlds as wd
from .learn import encode_obs, obs_dim
from .skills import SafetyEvent

BARRIER_TOL = -1e-6


@dataclass
class LowStepRecord:
    t: int
    agent_id: int
    slot: int
    obs_vec: np.ndarray
    skill_idx: int
    presquash: np.ndarray
    phi_logp: float
    r_low: float
    policy_version: int = 0
    seg_key: tuple = ()
    advantage: float = 0.0
    return_to_go: float = 0.0
    phi_grad: np.ndarray | None = None


@dataclass
class RolloutResult:
    segments: list = field(default_factory=list)
    low_steps: list = field(default_factory=list)
    events: list = field(default_factory=list)
    reward_steps: list = field(default_factory=list)
    reward_by_slot: list = field(default_factory=list)
    episode_log: wd.EpisodeLog | None = None
    min_barrier: float = math.inf
    violations_at_optimal: int = 0
    infeasible: int = 0
    fallbacks: int = 0
    optimal_steps: int = 0
    world: wd.WorldState | None = None


@dataclass
class _Live:
    skill_idx: int
    runtime: sk.SkillRuntime
    logp: float
    t_start: int
    obs_vec: np.ndarray
    joint_vec: np.ndarray
    mask: np.ndarray
    rewards: list = field(default_factory=list)
    waiting: bool = False      # finished, holding for the "all" scheme


def joint_vector(vec_map: dict, slots: dict, n_slots: int,
                 dim: int) -> np.ndarray:
    out = np.zeros(n_slots * dim)
    for agent_id, vec in vec_map.items():
        s = slots[agent_id] % n_slots
        out[s * dim:(s + 1) * dim] = vec
    return out


def run_episode(world: wd.WorldState, skill_specs: list, select_skill,
                provide_phi, *, gamma: float = 0.99, scheme: str = "continue",
                group_slots=None, collect_low: bool = False,
                pathwise: bool = False, policy_version: int = 0,
                low_version: int = 0, writer=None) -> RolloutResult:
    """Run one episode to its time limit (or until no agent is alive).

    ``select_skill(agent_id, obs, obs_vec, mask)`` returns (index, logp);
    ``provide_phi(agent_id, obs_vec, skill_idx)`` returns the program
    parameters plus the pre-squash sample and its log density.
    """
    cfg = world.cfg
    catalog = "road" if cfg.is_road() else "planar"
    dim = obs_dim(catalog)
    n_slots = cfg.num_agents
    if group_slots is None:
        group_slots = {s: tuple(range(n_slots)) for s in range(n_slots)}
    res = RolloutResult()
    res.min_barrier = min(res.min_barrier, wd.min_barrier(world))
    live: dict[int, _Live] = {}

    def close_segment(agent_id: int, lv: _Live, obs_vec_end, joint_end,
                      mask_end, done: bool):
        seg = smdp.SegmentTransition(
            agent_id=agent_id, obs_start=lv.obs_vec, joint_start=lv.joint_vec,
            skill_index=lv.skill_idx, duration=len(lv.rewards),
            seg_return=smdp.segment_return(lv.rewards, gamma),
            obs_end=obs_vec_end, joint_end=joint_end, done=done,
            t_abs=lv.t_start, mask_start=lv.mask, mask_end=mask_end,
            log_prob=lv.logp, policy_version=policy_version)
        res.segments.append(seg)
        if writer is not None:
            writer({"type": "segment", "agent": agent_id,
                    "skill": skill_specs[lv.skill_idx].skill_id,
                    "t0": lv.t_start, "k": seg.duration,
                    "R": seg.seg_return, "done": done})

    while world.agents and world.t < cfg.max_steps:
        t = world.t
        ids = sorted(world.agents)
        obs_map = {i: wd.observe(world, i) for i in ids}
        vec_map = {i: encode_obs(obs_map[i]) for i in ids}
        slots = {i: world.agents[i].slot for i in ids}
        jv = joint_vector(vec_map, slots, n_slots, dim)
        masks = {i: np.array([sk.is_initiable(s, obs_map[i])
                              for s in skill_specs]) for i in ids}

        finished = [i for i in ids if i in live and sk.terminate(
            skill_specs[live[i].skill_idx], live[i].runtime, obs_map[i], t)]
        fresh = [i for i in ids if i not in live]
        if scheme == smdp.CONTINUE:
            decide = fresh + finished
        elif scheme == smdp.ANY:
            decide = ids if finished else fresh
        else:  # all
            for i in finished:
                live[i].waiting = True
            holding = [i for i in ids if i in live and not live[i].waiting]
            decide = ids if not holding else fresh

        for i in decide:
            if i in live:
                close_segment(i, live[i], vec_map[i], jv, masks[i], done=False)
            idx, logp = select_skill(i, obs_map[i], vec_map[i], masks[i])
            runtime = sk.initiate(skill_specs[idx], obs_map[i], t)
            live[i] = _Live(skill_idx=idx, runtime=runtime, logp=logp,
                            t_start=t, obs_vec=vec_map[i], joint_vec=jv,
                            mask=masks[i])

        controls = {}
        statuses = {}
        low_records = {}
        for i in ids:
            lv = live[i]
            spec = skill_specs[lv.skill_idx]
            params, presquash, phi_logp = provide_phi(i, vec_map[i],
                                                      lv.skill_idx)
            result = sk.act(spec, lv.runtime, obs_map[i], params,
                            cfg.dynamics, step=t, agent_id=i)
            controls[i] = result.control
            statuses[i] = result.status
            res.events.extend(result.events)
            for ev in result.events:
                if ev.kind == sk.INFEASIBLE_QP:
                    res.infeasible += 1
                elif ev.kind == sk.FALLBACK_APPLIED:
                    res.fallbacks += 1
                if writer is not None:
                    writer({"type": "event", "t": t, "agent": i,
                            "kind": ev.kind, "min_b": ev.min_barrier_value})
            if result.status == "optimal":
                res.optimal_steps += 1
            if collect_low:
                rec = LowStepRecord(
                    t=t, agent_id=i, slot=slots[i], obs_vec=vec_map[i],
                    skill_idx=lv.skill_idx, presquash=presquash,
                    phi_logp=phi_logp, r_low=0.0,
                    policy_version=low_version,
                    seg_key=(i, lv.t_start))
                if pathwise and result.status == "optimal":
                    from .learn import phi_grads_from_qp
                    u = result.control
                    c1 = spec.intrinsic_coeffs[0]
                    rec.phi_grad = phi_grads_from_qp(result.build,
                                                     result.solution,
                                                     -2.0 * c1 * u)
                low_records[i] = rec

        per_agent_r = wd.per_agent_extrinsic(world, controls)
        r_h = float(sum(per_agent_r.values()))
        res.reward_steps.append(r_h)
        res.reward_by_slot.append({slots[i]: per_agent_r[i] for i in ids})
        r_lows = {i: sk.intrinsic_reward(skill_specs[live[i].skill_idx],
                                         live[i].runtime,
                                         world.agents[i].state, controls[i],
                                         obs_map[i])
                  for i in ids}
        for i in ids:
            group = group_slots.get(slots[i] % n_slots,
                                    tuple(range(n_slots)))
            r_group = sum(per_agent_r[j] for j in ids
                          if slots[j] % n_slots in group)
            live[i].rewards.append(r_group)
            if collect_low:
                rec = low_records[i]
                rec.r_low = r_lows[i]
                res.low_steps.append(rec)

        pre_states = {i: dyn.state_to_array(obs_map[i].own) for i in ids} \
            if writer is not None else {}
        world, events = wd.step_world(world, controls)
        post_min = wd.min_barrier(world)
        res.min_barrier = min(res.min_barrier, post_min)

        if writer is not None:
            writer({"type": "step", "t": t, "r_H": r_h,
                    "min_b": post_min if math.isfinite(post_min) else None,
                    "agents": [{"id": i,
                                "state": [float(x) for x in pre_states[i]],
                                "skill": skill_specs[live[i].skill_idx].skill_id,
                                "control": [float(c) for c in controls[i]],
                                "r_L": r_lows[i],
                                "status": statuses[i]} for i in ids],
                    "events": {str(i): e for i, e in events.events.items()}})
        for i in ids:
            terminal = events.of(i)
            if terminal in (wd.CRASH, wd.OUT_OF_ROAD):
                if statuses[i] == "optimal":
                    res.violations_at_optimal += 1
                res.events.append(SafetyEvent(step=t, agent=i,
                                              kind=sk.VIOLATION,
                                              min_barrier_value=-1.0))
            elif terminal == wd.NONE and statuses[i] == "optimal":
                worst = min(wd.agent_barriers(world, i))
                if worst < BARRIER_TOL:
                    res.violations_at_optimal += 1
                    res.events.append(SafetyEvent(step=t, agent=i,
                                                  kind=sk.VIOLATION,
                                                  min_barrier_value=worst))
            if terminal != wd.NONE and i in live:
                close_segment(i, live[i], vec_map[i], jv, masks[i], done=True)
                del live[i]

    # time limit reached with skills still running
    for i, lv in list(live.items()):
        close_segment(i, lv, lv.obs_vec, lv.joint_vec, lv.mask, done=True)

    log = wd.EpisodeLog(spawned=world.census.spawned,
                        results=list(world.finished), steps=world.t,
                        min_barrier=res.min_barrier,
                        violations_at_optimal=res.violations_at_optimal,
                        infeasible=res.infeasible, fallbacks=res.fallbacks,
                        clamp_events=world.clamp_events,
                        reward_total=float(sum(res.reward_steps)))
    res.episode_log = log
    res.world = world
    return res


def random_skill_selector(skill_specs, rng: np.random.Generator):
    """Uniform choice over the initiable skills."""
    def select(agent_id, obs, obs_vec, mask):
        idxs = np.flatnonzero(mask)
        pick = int(rng.choice(idxs))
        return pick, -math.log(len(idxs))
    return select


def scripted_skill_selector(skill_specs):
    """Merge-oriented heuristic: change lanes when possible, otherwise
    hold speed; planar agents steer toward the goal direction."""
    ids = [s.skill_id for s in skill_specs]

    def select(agent_id, obs, obs_vec, mask):
        def pick(name):
            k = ids.index(name)
            return (k, 0.0) if mask[k] else (ids.index(ids[0]), 0.0)
        if "cruise" in ids:
            if mask[ids.index("lane_change_left")]:
                return pick("lane_change_left")
            if obs.neighbors and obs.neighbors[0].distance < 8.0 \
                    and obs.neighbors[0].rel_pos[0] > 0:
                return pick("yield")
            return pick("accelerate")
        vel_angle = math.atan2(obs.goal.direction[1], obs.goal.direction[0])
        from .observation import own_velocity
        v = own_velocity(obs)
        if float(np.linalg.norm(v)) < 0.2:
            return pick("speed_up")
        head = math.atan2(v[1], v[0])
        diff = (vel_angle - head + math.pi) % (2 * math.pi) - math.pi
        if diff > 0.25:
            return pick("turn_left")
        if diff < -0.25:
            return pick("turn_right")
        return pick("speed_up")
    return select


def fixed_phi_provider(policy):
    """Deterministic parameters from the squashed network mean."""
    from .learn import sample_phi

    def provide(agent_id, obs_vec, skill_idx):
        params, presquash, _ = sample_phi(policy, obs_vec, skill_idx, None)
        return params, presquash, 0.0
    return provide


def sampled_phi_provider(policy, rng: np.random.Generator):
    from .learn import sample_phi

    def provide(agent_id, obs_vec, skill_idx):
        return sample_phi(policy, obs_vec, skill_idx, rng)
    return provide
