"""Configuration parsing, structured logs and deterministic seeding.

Configs are YAML documents with five sections (world, dynamics, safety,
skills, learn) plus a seed.  Unknown keys are rejected; every numeric
range is validated at parse time; world presets fill model-appropriate
defaults so an empty document is a complete merge configuration.

Logs are line-delimited JSON records tagged with a record type (step,
segment, event, metric) and stamped with run id, seed and iteration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import dynamics as dyn
from .barriers import SafetyParams
from .errors import ParseError
from .worlds import MERGE, SPREAD, TARGET, WorldConfig


@dataclass(frozen=True)
class SkillsConfig:
    t_max: int = 50
    dv: float = 1.0
    dtheta: float = 0.3
    tol_v: float = 0.1
    tol_d: float = 0.1
    cruise_distance: float = 10.0
    intrinsic: tuple = (0.1, 1.0, 0.5, 0.5)
    progress_bonus: float = 0.0


@dataclass(frozen=True)
class LearnConfig:
    gamma: float = 0.998
    lam: float = 0.3
    lr_high: float = 3e-3
    lr_low: float = 1e-4
    lr_critic: float = 3e-3
    iterations: int = 45
    batch_episodes: int = 1
    estimator: str = "pg"            # pg | q
    low_estimator: str = "score"     # score | pathwise
    sigma: float = 0.4
    entropy_coef: float = 0.01
    grouping: tuple | None = None    # tuple of slot tuples; None = joint
    termination_scheme: str = "continue"
    hidden: tuple = (64, 64)
    eval_episodes: int = 20


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig
    skills: SkillsConfig
    learn: LearnConfig
    seed: int = 0

    def catalog(self) -> str:
        return "road" if self.world.is_road() else "planar"


_WORLD_KEYS = {"name", "num_agents", "dt", "max_steps", "sensing_radius",
               "lane_width", "respawn", "obstacle_linger", "spawn_attempts",
               "arena_half", "obstacles", "goal_radius", "w_time", "w_energy",
               "w_progress"}
_DYN_KEYS = {"model", "wheelbase", "accel_min", "accel_max", "steer_abs_max",
             "v_min", "v_max"}
_SAFETY_KEYS = {"footprint_radius", "speed_gain", "obstacle_margin",
                "lane_half_width", "penalty", "phi_floor", "phi_cap",
                "spawn_margin", "headway_gate", "lane_change_gate"}
_SKILLS_KEYS = {"t_max", "dv", "dtheta", "tol_v", "tol_d", "cruise_distance",
                "intrinsic", "progress_bonus"}
_LEARN_KEYS = {"gamma", "lam", "lr_high", "lr_low", "lr_critic", "iterations",
               "batch_episodes", "estimator", "low_estimator", "sigma",
               "entropy_coef", "grouping", "termination_scheme", "hidden",
               "eval_episodes"}


def _reject_unknown(section: str, data: dict, allowed: set) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ParseError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ParseError(msg)


def _world_defaults(name: str) -> dict:
    if name == MERGE:
        return dict(sensing_radius=30.0, respawn=True, max_steps=1000,
                    num_agents=4, dt=0.05)
    return dict(sensing_radius=3.0, respawn=False, max_steps=200,
                num_agents=3, dt=0.1)


def _dynamics_defaults(name: str, model: str | None) -> dyn.DynamicsParams:
    if name == MERGE:
        return dyn.road_params(dt=0.05)
    model = model or dyn.DOUBLE_INTEGRATOR
    return dyn.planar_params(model=model)


def _safety_defaults(name: str) -> dict:
    if name == MERGE:
        return dict(footprint_radius=1.7, speed_gain=0.26, spawn_margin=2.0)
    return dict(footprint_radius=0.6, speed_gain=0.0, obstacle_margin=1.0,
                spawn_margin=0.5, headway_gate=0.5, lane_change_gate=0.5)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a YAML config; empty text gives the defaults."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("config document must be a mapping")
    _reject_unknown("config", raw,
                    {"world", "dynamics", "safety", "skills", "learn", "seed"})

    world_raw = dict(raw.get("world") or {})
    _reject_unknown("world", world_raw, _WORLD_KEYS)
    name = world_raw.get("name", MERGE)
    _require(name in (MERGE, TARGET, SPREAD), f"unknown world {name!r}")

    dyn_raw = dict(raw.get("dynamics") or {})
    _reject_unknown("dynamics", dyn_raw, _DYN_KEYS)
    dparams = _dynamics_defaults(name, dyn_raw.pop("model", None))
    if name == MERGE and dparams.model != dyn.FRENET:
        raise ParseError("merge world requires the path-coordinate model")
    dparams = dataclasses.replace(dparams, **dyn_raw)
    _require(dparams.dt > 0, "dt must be positive")
    _require(dparams.wheelbase > 0, "wheelbase must be positive")
    _require(dparams.accel_min < dparams.accel_max, "empty accel range")

    safety_raw = {**_safety_defaults(name), **dict(raw.get("safety") or {})}
    _reject_unknown("safety", safety_raw, _SAFETY_KEYS)
    safety = SafetyParams(**safety_raw)
    _require(safety.phi_floor > 0 and safety.phi_cap > safety.phi_floor,
             "phi box must satisfy 0 < floor < cap")
    _require(safety.penalty > 0, "penalty must be positive")

    world_args = {**_world_defaults(name), **world_raw}
    world_args["name"] = name
    if "obstacles" in world_args:
        world_args["obstacles"] = tuple(tuple(map(float, o))
                                        for o in world_args["obstacles"])
    dt = world_args.pop("dt", dparams.dt)
    _require(dt > 0, "dt must be positive")
    dparams = dataclasses.replace(dparams, dt=dt)
    world = WorldConfig(**world_args, dt=dt, safety=safety, dynamics=dparams)
    _require(world.num_agents >= 1, "need at least one agent")
    _require(world.max_steps >= 1, "max_steps must be positive")
    _require(world.sensing_radius > 0, "sensing radius must be positive")
    _require(world.lane_width > 0, "lane width must be positive")

    skills_raw = dict(raw.get("skills") or {})
    _reject_unknown("skills", skills_raw, _SKILLS_KEYS)
    if "intrinsic" in skills_raw:
        skills_raw["intrinsic"] = tuple(map(float, skills_raw["intrinsic"]))
        _require(len(skills_raw["intrinsic"]) == 4,
                 "intrinsic needs four coefficients")
    skills = SkillsConfig(**skills_raw)
    _require(skills.t_max >= 1, "t_max must be at least 1")
    _require(skills.dv > 0 and skills.dtheta > 0,
             "skill increments must be positive")

    learn_raw = dict(raw.get("learn") or {})
    _reject_unknown("learn", learn_raw, _LEARN_KEYS)
    if "hidden" in learn_raw:
        learn_raw["hidden"] = tuple(int(h) for h in learn_raw["hidden"])
    if learn_raw.get("grouping") is not None:
        learn_raw["grouping"] = tuple(tuple(int(a) for a in g)
                                      for g in learn_raw["grouping"])
    learn = LearnConfig(**learn_raw)
    _require(0.0 < learn.gamma <= 1.0, "gamma must be in (0, 1]")
    _require(0.0 <= learn.lam <= 1.0, "lambda must be in [0, 1]")
    _require(learn.estimator in ("pg", "q"), "estimator must be pg or q")
    _require(learn.low_estimator in ("score", "pathwise"),
             "low_estimator must be score or pathwise")
    _require(learn.termination_scheme in ("continue", "any", "all"),
             "unknown termination scheme")
    _require(learn.sigma >= 0.0, "sigma must be nonnegative")

    seed = raw.get("seed", 0)
    _require(isinstance(seed, int), "seed must be an integer")
    return RunConfig(world=world, skills=skills, learn=learn, seed=seed)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def config_digest(cfg: RunConfig) -> str:
    def enc(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: enc(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, (tuple, list)):
            return [enc(v) for v in obj]
        if callable(obj):
            return repr(obj)
        return obj
    blob = json.dumps(enc(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# deterministic seeding
# ---------------------------------------------------------------------------

def rng_for(seed: int, *path: int) -> np.random.Generator:
    """One generator per (seed, path) so parallel rollouts match serial."""
    ss = np.random.SeedSequence([seed, *path])
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# line-delimited records
# ---------------------------------------------------------------------------

class RecordWriter:
    """Appends tagged JSON records; every record carries run id, seed and
    iteration."""

    def __init__(self, path: str | Path, run_id: str, seed: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")
        self.run_id = run_id
        self.seed = seed
        self.iteration = 0

    def set_iteration(self, it: int) -> None:
        self.iteration = it

    def __call__(self, record: dict) -> None:
        rec = {"run": self.run_id, "seed": self.seed,
               "iter": self.iteration, **record}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path: str | Path, kind: str | None = None) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if kind is None or rec.get("type") == kind:
                out.append(rec)
    return out
