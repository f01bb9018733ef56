"""Command-line entry points.

    skillsafe train        --config F --seed N --out D
    skillsafe eval         --checkpoint C --episodes E [--config F] [--out D]
    skillsafe rollout      --policy {random|scripted|checkpoint} [...]
    skillsafe check-grad   --count N [--seed N]
    skillsafe audit-safety --episodes E [--config F] [--out D]
    skillsafe report       --run D [--out D]

Exit codes: eval returns nonzero when an uncertified safety violation
occurred; audit-safety returns nonzero when a certified (optimal-status)
step violated a barrier; check-grad returns nonzero when any block
exceeds the 1e-4 tolerance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import audits, report, rollout as ro, training, worlds as wd
from .harness import RecordWriter, RunConfig, load_config, parse_config, rng_for


def _config_from(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = parse_config("")
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _writer_for(out: str | None, name: str, cfg: RunConfig):
    if out is None:
        return None
    return RecordWriter(Path(out) / name, run_id=name.split(".")[0],
                        seed=cfg.seed)


def cmd_train(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    writer = _writer_for(args.out, "trajectory.jsonl", cfg) \
        if args.log_trajectories else None

    def progress(row):
        print(f"iter {row['iteration']:4d}  success {row['success_rate']:5.2f}"
              f"  sw_time {row['sw_time']:8.1f}  r_H {row['mean_r_H']:9.2f}"
              f"  violations {row['violations']}", flush=True)

    art = training.run_training(cfg, out, writer=writer,
                                progress=progress if args.verbose else None)
    if writer:
        writer.close()
    print(f"checkpoint: {art.checkpoint}")
    print(f"history: {out / 'history.jsonl'} ({len(art.history)} rows)")
    if art.aborted:
        print("training aborted on numerical error; checkpoint saved")
        return 2
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    policies = training.load_checkpoint(args.checkpoint, cfg,
                                        strict=not args.no_strict)
    writer = _writer_for(args.out, "eval.jsonl", cfg) if args.out else None
    rep = training.evaluate(cfg, policies, episodes=args.episodes,
                            writer=writer, flow=args.flow)
    if writer:
        writer.close()
    for key in ("success_rate", "sw_time", "sw_energy", "min_barrier",
                "violations", "infeasible", "fallbacks", "crashes",
                "out_of_road", "spawned"):
        print(f"{key}: {rep[key]}")
    return 1 if rep["violations"] > 0 else 0


def cmd_rollout(args) -> int:
    cfg = _config_from(args)
    specs = training.build_skill_specs(cfg)
    if args.policy == "checkpoint":
        if not args.checkpoint:
            print("rollout --policy checkpoint needs --checkpoint", file=sys.stderr)
            return 2
        policies = training.load_checkpoint(args.checkpoint, cfg,
                                            strict=not args.no_strict)
        selector = None
    else:
        policies = training.build_policies(cfg)
        selector = "random" if args.policy == "random" else "scripted"
    writer = _writer_for(args.out, "rollout.jsonl", cfg) if args.out else None
    logs, worst, infeasible = [], float("inf"), 0
    for e in range(args.episodes):
        world = wd.make_world(cfg.world, rng_for(cfg.seed, 21, e))
        if selector == "random":
            select = ro.random_skill_selector(specs, rng_for(cfg.seed, 22, e))
        elif selector == "scripted":
            select = ro.scripted_skill_selector(specs)
        else:
            from .learn import greedy_skill

            def select(agent_id, obs, obs_vec, mask):
                return greedy_skill(policies.high, obs_vec, mask), 0.0
        provide = ro.fixed_phi_provider(policies.low)
        res = ro.run_episode(world, specs, select, provide,
                             scheme=cfg.learn.termination_scheme,
                             writer=writer)
        logs.append(res.episode_log)
        worst = min(worst, res.min_barrier)
        infeasible += res.infeasible
    if writer:
        writer.close()
    m = wd.metrics(logs)
    print(f"episodes: {args.episodes}")
    print(f"success_rate: {m['success_rate']}")
    print(f"sw_time: {m['sw_time']}")
    print(f"min_barrier: {worst}")
    print(f"infeasible: {infeasible}")
    return 0


def cmd_check_grad(args) -> int:
    rep = audits.check_grad(count=args.count, seed=args.seed)
    print(f"instances checked: {rep.checked}  skipped: {rep.skipped}"
          f"  elapsed: {rep.elapsed:.2f}s")
    for block in ("H", "F", "G", "h"):
        print(f"max relative error [{block}]: {rep.max_err[block]:.3e}")
    if args.count == 0:
        print("PASS (no instances requested)")
        return 0
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def cmd_audit_safety(args) -> int:
    cfg = _config_from(args)
    writer = _writer_for(args.out, "audit.jsonl", cfg) if args.out else None
    rep = audits.audit_safety(cfg, episodes=args.episodes, writer=writer,
                              max_steps=args.max_steps)
    if writer:
        writer.close()
    print(f"episodes: {rep.episodes}  env steps: {rep.env_steps}"
          f"  elapsed: {rep.elapsed:.1f}s")
    print(f"min_barrier: {rep.min_barrier:.6g}")
    print(f"violations_at_optimal: {rep.violations_at_optimal}")
    print(f"infeasible: {rep.infeasible}  fallbacks: {rep.fallbacks}")
    print(f"crashes: {rep.crashes}  out_of_road: {rep.out_of_road}")
    print(f"spawned: {rep.spawned}  succeeded: {rep.succeeded}")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def cmd_report(args) -> int:
    files = report.render_run(args.run, args.out)
    for f in files:
        print(f)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="skillsafe", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train both policy levels")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--log-trajectories", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over seeded episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--flow", action="store_true",
                   help="keep continuous respawn during evaluation")
    p.add_argument("--no-strict", action="store_true",
                   help="skip the checkpoint config-hash check")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rollout", help="run scripted or random skill episodes")
    p.add_argument("--policy", choices=["random", "scripted", "checkpoint"],
                   default="random")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-strict", action="store_true")
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("check-grad", help="KKT gradients vs finite differences")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_check_grad)

    p = sub.add_parser("audit-safety",
                       help="random-skill safety audit of the certificates")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_audit_safety)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
