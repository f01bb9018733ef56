"""Joint training of the skill-selection and parameter-producing policies.

One iteration collects a batch of episodes with the current stochastic
policies, builds skill segments, then updates the high level (policy
gradient with a centralized critic, or the additive-mixer Q loss) and the
low level (score-function gradient on the blended reward-to-go) from the
same data.  Grouping, when enabled, only changes which agents' rewards
feed each segment return, so a single all-agents group reproduces the
joint objective bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learn
from . import rollout as ro
from . import skills as sk
from . import worlds as wd
from .errors import ConfigError, NumericalError
from .harness import RunConfig, config_digest, rng_for

CHECKPOINT_VERSION = 1


@dataclass
class Policies:
    high: learn.HighPolicy
    low: learn.LowPolicy
    qnet: learn.QNet | None = None


@dataclass
class TrainArtifacts:
    checkpoint: Path | None
    history: list = field(default_factory=list)
    aborted: bool = False


def build_skill_specs(cfg: RunConfig) -> list[sk.SkillSpec]:
    s = cfg.skills
    return sk.catalog(cfg.catalog(), t_max=s.t_max, dv=s.dv, dtheta=s.dtheta,
                      intrinsic_coeffs=s.intrinsic,
                      progress_bonus=s.progress_bonus, tol_v=s.tol_v,
                      tol_d=s.tol_d, cruise_distance=s.cruise_distance,
                      safety=cfg.world.safety)


def build_policies(cfg: RunConfig, seed_offset: int = 0) -> Policies:
    specs = build_skill_specs(cfg)
    dim = learn.obs_dim(cfg.catalog())
    joint = dim * cfg.world.num_agents
    rng = rng_for(cfg.seed, 90, seed_offset)
    high = learn.HighPolicy(dim, len(specs), joint,
                            hidden=cfg.learn.hidden, rng=rng)
    low = learn.LowPolicy(dim, specs, hidden=cfg.learn.hidden,
                          sigma=cfg.learn.sigma, rng=rng)
    qnet = None
    if cfg.learn.estimator == "q":
        qnet = learn.QNet(dim, len(specs), hidden=cfg.learn.hidden, rng=rng)
    return Policies(high=high, low=low, qnet=qnet)


def group_slot_map(cfg: RunConfig) -> dict:
    n = cfg.world.num_agents
    if cfg.learn.grouping is None:
        groups = [tuple(range(n))]
    else:
        groups = [tuple(g) for g in cfg.learn.grouping]
        learn.validate_partition(groups, range(n))
    out = {}
    for g in groups:
        for slot in g:
            out[slot] = tuple(sorted(g))
    return out


def collect_episode(cfg: RunConfig, policies: Policies, episode_index: int,
                    *, explore: bool = True, collect_low: bool = True,
                    writer=None, respawn: bool | None = None,
                    selector=None) -> ro.RolloutResult:
    """One seeded episode under the current policies."""
    world_cfg = cfg.world
    if respawn is not None and respawn != world_cfg.respawn:
        import dataclasses
        world_cfg = dataclasses.replace(world_cfg, respawn=respawn)
    world = wd.make_world(world_cfg, rng_for(cfg.seed, 1, episode_index))
    specs = build_skill_specs(cfg)
    act_rng = rng_for(cfg.seed, 2, episode_index)

    if selector is not None:
        select = selector
    elif explore:
        def select(agent_id, obs, obs_vec, mask):
            return learn.sample_skill(policies.high, obs_vec, mask, act_rng)
    else:
        def select(agent_id, obs, obs_vec, mask):
            return learn.greedy_skill(policies.high, obs_vec, mask), 0.0

    if explore and policies.low.sigma > 0:
        provide = ro.sampled_phi_provider(policies.low, act_rng)
    else:
        provide = ro.fixed_phi_provider(policies.low)

    return ro.run_episode(world, specs, select, provide,
                          gamma=cfg.learn.gamma,
                          scheme=cfg.learn.termination_scheme,
                          group_slots=group_slot_map(cfg),
                          collect_low=collect_low,
                          pathwise=(cfg.learn.low_estimator == "pathwise"),
                          policy_version=policies.high.version,
                          low_version=policies.low.version,
                          writer=writer)


def attach_advantages(policies: Policies, result: ro.RolloutResult,
                      gamma: float) -> None:
    if not result.segments:
        return
    adv = learn.high_advantages(policies.high, result.segments, gamma)
    by_key = {}
    for seg, a in zip(result.segments, adv):
        seg.advantage = float(a)
        by_key[(seg.agent_id, seg.t_abs)] = float(a)
    for rec in result.low_steps:
        rec.advantage = by_key.get(rec.seg_key, 0.0)


def blended_returns_to_go(result: ro.RolloutResult, lam: float, gamma: float,
                          n_agents: int) -> None:
    streams: dict[int, list] = {}
    for rec in result.low_steps:
        streams.setdefault(rec.agent_id, []).append(rec)
    for recs in streams.values():
        recs.sort(key=lambda r: r.t)
        acc = 0.0
        for rec in reversed(recs):
            r_tilde = learn.blend_reward(rec.r_low, rec.advantage, lam,
                                         n_agents)
            acc = r_tilde + gamma * acc
            rec.return_to_go = acc


def training_iteration(cfg: RunConfig, policies: Policies, opts: dict,
                       iteration: int, writer=None) -> dict:
    results = []
    base = iteration * cfg.learn.batch_episodes
    for b in range(cfg.learn.batch_episodes):
        results.append(collect_episode(cfg, policies, base + b,
                                       writer=writer))
    segments = [s for r in results for s in r.segments]
    for r in results:
        attach_advantages(policies, r, cfg.learn.gamma)
        blended_returns_to_go(r, cfg.learn.lam, cfg.learn.gamma,
                              cfg.world.num_agents)
    low_steps = [rec for r in results for rec in r.low_steps]

    if cfg.learn.estimator == "pg":
        high_report = learn.high_pg_update(
            policies.high, segments, cfg.learn.gamma,
            entropy_coef=cfg.learn.entropy_coef,
            actor_opt=opts["actor"], critic_opt=opts["critic"])
    else:
        high_report = learn.q_update(policies.qnet, segments, cfg.learn.gamma,
                                     opt=opts["qnet"])
        policies.high.version += 1      # selection net unused on this path
    low_report = learn.low_pg_update(
        policies.low, low_steps, cfg.learn.lam, cfg.learn.gamma,
        estimator=cfg.learn.low_estimator, n_agents=cfg.world.num_agents,
        opt=opts["low"])

    m = wd.metrics([r.episode_log for r in results])
    row = {
        "iteration": iteration,
        "success_rate": m["success_rate"],
        "sw_time": m["sw_time"],
        "sw_energy": m["sw_energy"],
        "mean_r_H": float(np.mean([r.episode_log.reward_total
                                   for r in results])),
        "min_barrier": float(min(r.min_barrier for r in results)),
        "violations": int(sum(r.violations_at_optimal for r in results)),
        "infeasible": int(sum(r.infeasible for r in results)),
        "fallbacks": int(sum(r.fallbacks for r in results)),
        "env_steps": int(sum(r.episode_log.steps for r in results)),
        **{f"high_{k}": round(v, 8) for k, v in high_report.items()},
        **{f"low_{k}": round(v, 8) for k, v in low_report.items()},
    }
    return row


def run_training(cfg: RunConfig, out_dir: str | Path,
                 writer=None, progress=None) -> TrainArtifacts:
    """Full training run; writes metric rows and a final checkpoint.

    On a numerical failure the run aborts cleanly after saving a
    checkpoint of the last consistent parameters.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policies = build_policies(cfg)
    opts = {
        "actor": learn.Adam(learn._net_arrays(policies.high.actor),
                            cfg.learn.lr_high),
        "critic": learn.Adam(learn._net_arrays(policies.high.critic),
                             cfg.learn.lr_critic),
        "low": learn.Adam(learn._net_arrays(policies.low.net),
                          cfg.learn.lr_low),
    }
    if policies.qnet is not None:
        opts["qnet"] = learn.Adam(learn._net_arrays(policies.qnet.net),
                                  cfg.learn.lr_high)
    art = TrainArtifacts(checkpoint=None)
    env_steps = 0
    try:
        for it in range(cfg.learn.iterations):
            if writer is not None:
                writer.set_iteration(it)
            row = training_iteration(cfg, policies, opts, it, writer=writer)
            env_steps += row["env_steps"]
            row["total_env_steps"] = env_steps
            art.history.append(row)
            if writer is not None:
                writer({"type": "metric", **row})
            if progress is not None:
                progress(row)
    except NumericalError:
        art.aborted = True
    art.checkpoint = out / "checkpoint.npz"
    save_checkpoint(art.checkpoint, cfg, policies)
    with open(out / "history.jsonl", "w") as fh:
        for row in art.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return art


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, cfg: RunConfig,
                    policies: Policies) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config_hash": config_digest(cfg),
            "catalog": cfg.catalog(), "has_qnet": policies.qnet is not None}
    arrays = {
        "high_actor": policies.high.actor.get_flat(),
        "high_critic": policies.high.critic.get_flat(),
        "low": policies.low.net.get_flat(),
        "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
    }
    if policies.qnet is not None:
        arrays["qnet"] = policies.qnet.net.get_flat()
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path, cfg: RunConfig,
                    strict: bool = True) -> Policies:
    data = np.load(path)
    meta = json.loads(bytes(data["meta"]).decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ConfigError("checkpoint version mismatch")
    if strict and meta["config_hash"] != config_digest(cfg):
        raise ConfigError("checkpoint was produced under a different config")
    policies = build_policies(cfg)
    policies.high.actor.set_flat(data["high_actor"])
    policies.high.critic.set_flat(data["high_critic"])
    policies.low.net.set_flat(data["low"])
    if meta.get("has_qnet") and "qnet" in data:
        if policies.qnet is None:
            policies.qnet = learn.QNet(learn.obs_dim(cfg.catalog()),
                                       policies.low.n_skills,
                                       hidden=cfg.learn.hidden,
                                       rng=rng_for(cfg.seed, 91))
        policies.qnet.net.set_flat(data["qnet"])
    return policies


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(cfg: RunConfig, policies: Policies, episodes: int,
             seed_offset: int = 10_000, writer=None,
             selector=None, flow: bool = False) -> dict:
    """Greedy evaluation over seeded episodes.

    Runs finite waves (respawn off) unless flow is requested, so the
    success rate measures completion of a cohort within the time limit.
    """
    logs, results = [], []
    for e in range(episodes):
        res = collect_episode(cfg, policies, seed_offset + e, explore=False,
                              collect_low=False, writer=writer,
                              respawn=flow, selector=selector)
        logs.append(res.episode_log)
        results.append(res)
    m = wd.metrics(logs)
    report = {
        "episodes": episodes,
        **{k: m[k] for k in ("success_rate", "sw_time", "sw_energy",
                             "weighted")},
        "min_barrier": float(min(r.min_barrier for r in results)),
        "violations": int(sum(r.violations_at_optimal for r in results)),
        "infeasible": int(sum(r.infeasible for r in results)),
        "fallbacks": int(sum(r.fallbacks for r in results)),
        "crashes": int(sum(1 for l in logs for x in l.results
                           if x.outcome == wd.CRASH)),
        "out_of_road": int(sum(1 for l in logs for x in l.results
                               if x.outcome == wd.OUT_OF_ROAD)),
        "spawned": int(sum(l.spawned for l in logs)),
    }
    if writer is not None:
        writer({"type": "metric", "phase": "eval", **report})
    return report
