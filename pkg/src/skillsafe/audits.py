"""Runnable checks behind the package's two analytic claims.

check_grad compares the KKT-based parameter gradients of random programs
against central finite differences, block by block.  audit_safety runs
seeded episodes under uniformly random (masked) skill selection with the
program-based low level and reports the worst barrier value over every
step certified by an optimal program status.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import qp
from . import rollout as ro
from . import worlds as wd
from .errors import SingularKKTError
from .harness import RunConfig, rng_for
from .training import build_policies, build_skill_specs, group_slot_map


@dataclass
class GradReport:
    checked: int = 0
    skipped: int = 0
    max_err: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and all(e <= 1e-4 for e in self.max_err.values())


def _grad_instance(rng: np.random.Generator) -> qp.QPSpec:
    n = int(rng.integers(2, 6))
    m = int(rng.integers(2, 9))
    A = rng.normal(size=(n, n))
    H = A @ A.T / n + np.diag(rng.uniform(0.5, 2.0, size=n))
    H = (H + H.T) / 2
    F = rng.normal(scale=2.0, size=n)
    anchor = rng.normal(scale=0.5, size=n)
    G = rng.normal(size=(m, n))
    h = G @ anchor + rng.uniform(0.05, 1.5, size=m)
    return qp.QPSpec.build(H=H, F=F, G=G, h=h)


def _rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-2)


def check_grad(count: int = 100, seed: int = 0, fd_eps: float = 1e-5) -> GradReport:
    """Analytic vs central-difference gradients on random programs.

    Degenerate samples (weakly active rows, or an active set that changes
    under the probe perturbation) are skipped and counted.
    """
    rng = rng_for(seed, 77)
    report = GradReport(max_err={"H": 0.0, "F": 0.0, "G": 0.0, "h": 0.0})
    t0 = time.perf_counter()
    attempts = 0
    while report.checked < count and attempts < 20 * max(count, 1):
        attempts += 1
        spec = _grad_instance(rng)
        sol = qp.solve(spec)
        if sol.status != qp.OPTIMAL:
            report.skipped += 1
            continue
        slack = spec.h - spec.G @ sol.primal
        strict = np.all((sol.dual > 1e-5) | (slack > 1e-5))
        if not strict:
            report.skipped += 1
            continue
        incoming = rng.normal(size=spec.n)
        try:
            d = qp.kkt_differentials(spec, sol, incoming)
        except SingularKKTError:
            report.skipped += 1
            continue
        grads = qp.parameter_grads(spec, sol, d.d_mu, d.d_lambda)

        def scalar(s: qp.QPSpec) -> float:
            return float(incoming @ qp.solve(s).primal)

        i = int(rng.integers(0, spec.n))
        j = int(rng.integers(0, spec.n))
        k = int(rng.integers(0, spec.m))

        def fd(setter) -> float:
            return (scalar(setter(+fd_eps)) - scalar(setter(-fd_eps))) \
                / (2 * fd_eps)

        def set_h(d_):
            h2 = spec.h.copy()
            h2[k] += d_
            return qp.QPSpec(spec.H, spec.F, spec.G, h2, spec.lb, spec.ub)

        def set_f(d_):
            f2 = spec.F.copy()
            f2[i] += d_
            return qp.QPSpec(spec.H, f2, spec.G, spec.h, spec.lb, spec.ub)

        def set_hm(d_):
            H2 = spec.H.copy()
            H2[i, j] += d_
            return qp.QPSpec(H2, spec.F, spec.G, spec.h, spec.lb, spec.ub)

        def set_g(d_):
            G2 = spec.G.copy()
            G2[k, j] += d_
            return qp.QPSpec(spec.H, spec.F, G2, spec.h, spec.lb, spec.ub)

        errs = {"h": _rel_err(grads.dh[k], fd(set_h)),
                "F": _rel_err(grads.dF[i], fd(set_f)),
                "H": _rel_err(grads.dH[i, j], fd(set_hm)),
                "G": _rel_err(grads.dG[k, j], fd(set_g))}
        report.checked += 1
        for key, val in errs.items():
            report.max_err[key] = max(report.max_err[key], val)
    report.elapsed = time.perf_counter() - t0
    if count == 0:
        report.max_err = {k: 0.0 for k in report.max_err}
    return report


@dataclass
class SafetyAudit:
    episodes: int = 0
    env_steps: int = 0
    min_barrier: float = math.inf
    violations_at_optimal: int = 0
    infeasible: int = 0
    fallbacks: int = 0
    crashes: int = 0
    out_of_road: int = 0
    spawned: int = 0
    succeeded: int = 0
    mean_lifetime: float = 0.0
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return (self.violations_at_optimal == 0
                and self.min_barrier >= ro.BARRIER_TOL)


def audit_safety(cfg: RunConfig, episodes: int = 100, seed: int | None = None,
                 writer=None, max_steps: int | None = None) -> SafetyAudit:
    """Random masked skills through the program-based low level.

    The certificate covers optimal-status steps only; fallback steps are
    reported but do not fail the audit by themselves.
    """
    import dataclasses
    seed = cfg.seed if seed is None else seed
    specs = build_skill_specs(cfg)
    policies = build_policies(cfg)
    world_cfg = cfg.world
    if max_steps is not None:
        world_cfg = dataclasses.replace(world_cfg, max_steps=max_steps)
    audit = SafetyAudit(episodes=episodes)
    t0 = time.perf_counter()
    lifetimes = []
    for e in range(episodes):
        world = wd.make_world(world_cfg, rng_for(seed, 11, e))
        select = ro.random_skill_selector(specs, rng_for(seed, 12, e))
        provide = ro.fixed_phi_provider(policies.low)
        res = ro.run_episode(world, specs, select, provide,
                             scheme=cfg.learn.termination_scheme,
                             group_slots=group_slot_map(cfg), writer=writer)
        log = res.episode_log
        audit.env_steps += log.steps
        audit.min_barrier = min(audit.min_barrier, res.min_barrier)
        audit.violations_at_optimal += res.violations_at_optimal
        audit.infeasible += res.infeasible
        audit.fallbacks += res.fallbacks
        audit.spawned += log.spawned
        for r in log.results:
            lifetimes.append(r.steps)
            if r.outcome == wd.CRASH:
                audit.crashes += 1
            elif r.outcome == wd.OUT_OF_ROAD:
                audit.out_of_road += 1
            elif r.outcome == wd.SUCCESS:
                audit.succeeded += 1
    audit.mean_lifetime = float(np.mean(lifetimes)) if lifetimes else 0.0
    audit.elapsed = time.perf_counter() - t0
    if writer is not None:
        writer({"type": "metric", "phase": "audit",
                "min_barrier": audit.min_barrier,
                "violations": audit.violations_at_optimal,
                "infeasible": audit.infeasible,
                "crashes": audit.crashes, "out_of_road": audit.out_of_road})
    return audit
