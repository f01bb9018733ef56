"""Independent reference implementations used only by the test suite.

The QP oracle is a dual accelerated projected-gradient method with an
active-set polish driven by the first-order iterates.  It shares no code
path with the package's active-set solver: the active set is detected
from converged multipliers, never from pivoting.
"""

from __future__ import annotations

import numpy as np


def _stack_rows(spec):
    rows = [spec.G] if spec.G.size else []
    offs = [spec.h] if spec.G.size else []
    n = spec.n
    for j in range(n):
        if np.isfinite(spec.ub[j]):
            e = np.zeros(n)
            e[j] = 1.0
            rows.append(e[None, :])
            offs.append(np.array([spec.ub[j]]))
        if np.isfinite(spec.lb[j]):
            e = np.zeros(n)
            e[j] = -1.0
            rows.append(e[None, :])
            offs.append(np.array([-spec.lb[j]]))
    if rows:
        return np.vstack(rows), np.concatenate(offs)
    return np.zeros((0, n)), np.zeros(0)


def reference_objective(spec, iters: int = 40000):
    """High-accuracy optimal objective via dual FISTA plus polish.

    Returns (objective, x, certified). ``certified`` is True when the
    polished point passed feasibility and dual-sign checks, in which case
    the objective is exact to solver precision.
    """
    P = spec.H + spec.H.T
    A, b = _stack_rows(spec)
    Pinv = np.linalg.inv(P)

    def x_of(lam):
        return -Pinv @ (spec.F + A.T @ lam)

    if A.shape[0] == 0:
        x = -Pinv @ spec.F
        return spec.objective(x), x, True

    lipschitz = float(np.linalg.eigvalsh(A @ Pinv @ A.T).max()) + 1e-12
    lam = np.zeros(A.shape[0])
    y = lam.copy()
    t_k = 1.0
    for _ in range(iters):
        grad = A @ x_of(y) - b
        lam_next = np.maximum(0.0, y + grad / lipschitz)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
        y = lam_next + (t_k - 1.0) / t_next * (lam_next - lam)
        lam, t_k = lam_next, t_next

    x = x_of(lam)
    slack = b - A @ x
    active = np.where((lam > 1e-6) | (slack < 1e-7))[0]
    certified = False
    if active.size:
        Aa = A[active]
        k = active.size
        K = np.block([[P, Aa.T], [Aa, np.zeros((k, k))]])
        rhs = np.concatenate([-spec.F, b[active]])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        x_pol, nu = sol[:spec.n], sol[spec.n:]
        feas = np.all(A @ x_pol <= b + 1e-9)
        if feas and np.all(nu >= -1e-9):
            x, certified = x_pol, True
    else:
        x = -Pinv @ spec.F
        certified = bool(np.all(A @ x <= b + 1e-9))
    return spec.objective(x), x, certified


def grid_objective_2d(spec, lo=-4.0, hi=4.0, levels=4, pts=200):
    """Brute-force refined grid search for 2-variable programs."""
    best = None
    span = (lo, hi, lo, hi)
    for _ in range(levels):
        xs = np.linspace(span[0], span[1], pts)
        ys = np.linspace(span[2], span[3], pts)
        X, Y = np.meshgrid(xs, ys)
        pts2 = np.stack([X.ravel(), Y.ravel()], axis=1)
        ok = np.ones(len(pts2), dtype=bool)
        if spec.G.size:
            ok &= np.all(pts2 @ spec.G.T <= spec.h + 1e-12, axis=1)
        ok &= np.all(pts2 >= spec.lb - 1e-12, axis=1)
        ok &= np.all(pts2 <= spec.ub + 1e-12, axis=1)
        if not ok.any():
            return None
        vals = np.einsum("ij,jk,ik->i", pts2, spec.H, pts2) + pts2 @ spec.F
        vals[~ok] = np.inf
        i = int(np.argmin(vals))
        best = (float(vals[i]), pts2[i])
        dx = (span[1] - span[0]) / pts * 3
        dy = (span[3] - span[2]) / pts * 3
        span = (pts2[i][0] - dx, pts2[i][0] + dx, pts2[i][1] - dy, pts2[i][1] + dy)
    return best


def random_instance(rng: np.random.Generator, n=None, m=None, with_box=None):
    """Feasible strictly convex instance with a healthy active fraction."""
    from skillsafe.qp import QPSpec

    n = n or int(rng.integers(2, 7))
    m = m or int(rng.integers(1, 11))
    A = rng.normal(size=(n, n))
    H = A @ A.T / n + np.diag(rng.uniform(0.5, 2.0, size=n))
    F = rng.normal(scale=2.0, size=n)
    x_anchor = rng.normal(scale=0.5, size=n)
    G = rng.normal(size=(m, n))
    h = G @ x_anchor + rng.uniform(0.05, 1.5, size=m)
    if with_box is None:
        with_box = bool(rng.integers(0, 2))
    if with_box:
        lb = x_anchor - rng.uniform(1.0, 4.0, size=n)
        ub = x_anchor + rng.uniform(1.0, 4.0, size=n)
    else:
        lb = ub = None
    return QPSpec.build(H=(H + H.T) / 2, F=F, G=G, h=h, lb=lb, ub=ub)
