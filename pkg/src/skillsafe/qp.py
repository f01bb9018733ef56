"""Dense strictly convex quadratic programs with exact sensitivities.

The program solved at every control step is

    min_x  x^T H x + F^T x      s.t.  G x <= h,  lb <= x <= ub

with H symmetric positive definite (note the objective carries no 1/2;
the Hessian of the objective is H + H^T).  The solver is a dual
active-set method in the Goldfarb-Idnani style: it starts from the
unconstrained minimiser, adds the most violated constraint, and walks
primal/dual steps until primal feasibility.  For the small dense
programs used here (a handful of variables, tens of rows) every linear
solve is done fresh with LAPACK; the payoff is an exact active set,
which the backward pass below requires.

The backward pass linearises the KKT conditions at the optimum.  With
``P`` the objective Hessian and ``A`` the active rows (user rows and
active box rows), the adjoint system

    [P  A^T] [d_mu]   [-incoming]
    [A   0 ] [d_nu] = [    0    ]

yields the gradients of ``incoming . x*`` with respect to every
parameter block:

    dF = d_mu
    dH = d_mu x*^T + x* d_mu^T
    dG = (lambda o d_lambda) x*^T + lambda d_mu^T
    dh = -(lambda o d_lambda)         with d_lambda_i = d_nu_i / lambda_i

Box rows participate in the linear system when active but are not
differentiated: the control bounds are fixed, not learnable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import NumericalError, SingularKKTError, DomainError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

_VIOL_TOL = 1e-10
_ZERO_TOL = 1e-11
_DEGENERATE_TOL = 1e-8
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class QPSpec:
    H: np.ndarray
    F: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    @staticmethod
    def build(H, F, G=None, h=None, lb=None, ub=None) -> "QPSpec":
        H = np.atleast_2d(np.asarray(H, dtype=float))
        F = np.asarray(F, dtype=float).ravel()
        n = F.size
        if G is None:
            G = np.zeros((0, n))
            h = np.zeros(0)
        G = np.asarray(G, dtype=float).reshape(-1, n)
        h = np.asarray(h, dtype=float).ravel()
        lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
        ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        if H.shape != (n, n) or h.size != G.shape[0]:
            raise DomainError("inconsistent QP dimensions")
        if np.any(lb > ub):
            raise DomainError("empty box: lb > ub")
        return QPSpec(H=H, F=F, G=G, h=h, lb=lb, ub=ub)

    @property
    def n(self) -> int:
        return self.F.size

    @property
    def m(self) -> int:
        return self.G.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(x @ self.H @ x + self.F @ x)


@dataclass
class QPSolution:
    primal: np.ndarray
    dual: np.ndarray            # user rows, >= 0
    dual_lb: np.ndarray
    dual_ub: np.ndarray
    active_set: list[int]       # user rows tight at the optimum
    active_lb: list[int]
    active_ub: list[int]
    status: str
    iterations: int = 0


@dataclass(frozen=True)
class QPGradients:
    dH: np.ndarray
    dF: np.ndarray
    dG: np.ndarray
    dh: np.ndarray


@dataclass(frozen=True)
class KKTDifferentials:
    d_mu: np.ndarray
    d_lambda: np.ndarray
    dropped_rows: tuple[int, ...] = ()


def _stacked_constraints(spec: QPSpec):
    """All rows as normals with n_i^T x >= b_i; returns (N rows, b, tags).

    tags[i] is ("row", j) for user rows, ("lb", j) / ("ub", j) for box rows.
    """
    normals, offsets, tags = [], [], []
    for j in range(spec.m):
        normals.append(-spec.G[j])
        offsets.append(-spec.h[j])
        tags.append(("row", j))
    for j in range(spec.n):
        if np.isfinite(spec.lb[j]):
            e = np.zeros(spec.n)
            e[j] = 1.0
            normals.append(e)
            offsets.append(spec.lb[j])
            tags.append(("lb", j))
        if np.isfinite(spec.ub[j]):
            e = np.zeros(spec.n)
            e[j] = -1.0
            normals.append(e)
            offsets.append(-spec.ub[j])
            tags.append(("ub", j))
    if normals:
        return np.array(normals), np.array(offsets), tags
    return np.zeros((0, spec.n)), np.zeros(0), tags


def solve(spec: QPSpec) -> QPSolution:
    """Solve the program; deterministic for identical inputs.

    Raises NumericalError when H is numerically indefinite or its
    condition number exceeds 1e12.
    """
    P = spec.H + spec.H.T
    try:
        chol = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("objective matrix is not positive definite") from exc
    if np.linalg.cond(spec.H) > _COND_LIMIT:
        raise NumericalError("objective matrix condition number exceeds 1e12")

    def p_solve(rhs):
        y = np.linalg.solve(chol, rhs)
        return np.linalg.solve(chol.T, y)

    N_all, b_all, tags = _stacked_constraints(spec)
    x = p_solve(-spec.F)
    active: list[int] = []
    lam: list[float] = []
    n_rows = N_all.shape[0]
    max_iter = 50 * (n_rows + spec.n + 1)
    it = 0
    status = OPTIMAL

    while True:
        it += 1
        if it > max_iter:
            status = MAX_ITER
            break
        slack = N_all @ x - b_all if n_rows else np.zeros(0)
        viol = np.where(slack < -_VIOL_TOL)[0]
        viol = [v for v in viol if v not in active]
        if not viol:
            break
        p = min(viol, key=lambda i: (slack[i], i))
        n_plus = N_all[p]
        lam_plus = 0.0
        infeasible = False

        while True:
            it += 1
            if it > max_iter:
                status = MAX_ITER
                break
            if active:
                N = N_all[active].T                     # n x k
                PiN = p_solve(N)
                M = N.T @ PiN
                try:
                    r = np.linalg.solve(M, N.T @ p_solve(n_plus))
                except np.linalg.LinAlgError as exc:
                    raise NumericalError("singular active-set system") from exc
                z = p_solve(n_plus) - PiN @ r
            else:
                r = np.zeros(0)
                z = p_solve(n_plus)

            t1, blocking = math.inf, -1
            for idx, rj in enumerate(r):
                if rj > _ZERO_TOL:
                    cand = lam[idx] / rj
                    if cand < t1 - 1e-15:
                        t1, blocking = cand, idx
            z_dot = float(z @ n_plus)
            s_p = float(n_plus @ x - b_all[p])
            t2 = -s_p / z_dot if z_dot > _ZERO_TOL else math.inf

            t = min(t1, t2)
            if not math.isfinite(t):
                infeasible = True
                break

            if math.isfinite(t2):
                x = x + t * z
            lam = [lj - t * rj for lj, rj in zip(lam, r)]
            lam_plus += t

            if t == t2:
                active.append(p)
                lam.append(lam_plus)
                break
            # dual step hit a blocking constraint first: drop it and retry
            del active[blocking]
            del lam[blocking]

        if status == MAX_ITER:
            break
        if infeasible:
            status = INFEASIBLE
            break

    m = spec.m
    dual = np.zeros(m)
    dual_lb = np.zeros(spec.n)
    dual_ub = np.zeros(spec.n)
    act_rows, act_lb, act_ub = [], [], []
    for idx, lmbda in zip(active, lam):
        kind, j = tags[idx]
        if kind == "row":
            dual[j] = lmbda
            act_rows.append(j)
        elif kind == "lb":
            dual_lb[j] = lmbda
            act_lb.append(j)
        else:
            dual_ub[j] = lmbda
            act_ub.append(j)
    return QPSolution(primal=x, dual=dual, dual_lb=dual_lb, dual_ub=dual_ub,
                      active_set=sorted(act_rows), active_lb=sorted(act_lb),
                      active_ub=sorted(act_ub), status=status, iterations=it)


def kkt_differentials(spec: QPSpec, sol: QPSolution,
                      incoming: np.ndarray) -> KKTDifferentials:
    """Solution differentials for the scalar  incoming . x*.

    Solves the linearised KKT system restricted to the strictly active
    rows.  Weakly active rows (multiplier and slack both below 1e-8) are
    dropped from the system and reported in ``dropped_rows``; active box
    rows participate in the system but carry no output gradient.
    """
    if sol.status != OPTIMAL:
        raise DomainError("differentials require an optimal solution")
    incoming = np.asarray(incoming, dtype=float).ravel()
    if incoming.size != spec.n:
        raise DomainError("incoming gradient has wrong dimension")

    P = spec.H + spec.H.T
    x = sol.primal
    slack = spec.h - spec.G @ x if spec.m else np.zeros(0)

    rows, dropped = [], []
    for j in range(spec.m):
        lam = sol.dual[j]
        if lam > _DEGENERATE_TOL:
            rows.append(("row", j, spec.G[j]))
        elif slack[j] <= _DEGENERATE_TOL:
            dropped.append(j)
    for j in sol.active_lb:
        if sol.dual_lb[j] > _DEGENERATE_TOL:
            e = np.zeros(spec.n)
            e[j] = -1.0
            rows.append(("lb", j, e))
    for j in sol.active_ub:
        if sol.dual_ub[j] > _DEGENERATE_TOL:
            e = np.zeros(spec.n)
            e[j] = 1.0
            rows.append(("ub", j, e))

    k = len(rows)
    K = np.zeros((spec.n + k, spec.n + k))
    K[:spec.n, :spec.n] = P
    for i, (_, _, g) in enumerate(rows):
        K[:spec.n, spec.n + i] = g
        K[spec.n + i, :spec.n] = g
    rhs = np.concatenate([-incoming, np.zeros(k)])
    try:
        sol_vec = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularKKTError("degenerate active set") from exc

    d_mu = sol_vec[:spec.n]
    d_lambda = np.zeros(spec.m)
    for i, (kind, j, _) in enumerate(rows):
        if kind == "row":
            d_lambda[j] = sol_vec[spec.n + i] / sol.dual[j]
    return KKTDifferentials(d_mu=d_mu, d_lambda=d_lambda,
                            dropped_rows=tuple(dropped))


def parameter_grads(spec: QPSpec, sol: QPSolution, d_mu: np.ndarray,
                    d_lambda: np.ndarray) -> QPGradients:
    """Gradients of the chosen primal scalar w.r.t. (H, F, G, h)."""
    x = sol.primal
    d_nu = sol.dual * d_lambda
    dH = np.outer(d_mu, x) + np.outer(x, d_mu)
    dF = d_mu.copy()
    dG = np.outer(d_nu, x) + np.outer(sol.dual, d_mu)
    dh = -d_nu
    return QPGradients(dH=dH, dF=dF, dG=dG, dh=dh)


def feasibility_probe(G: np.ndarray, h: np.ndarray,
                      lb: np.ndarray, ub: np.ndarray) -> bool:
    """Phase-1 linear feasibility of {G x <= h, lb <= x <= ub}.

    Independent of the active-set solver; used by audits and by the
    fallback logic to distinguish hard-row infeasibility from numerical
    failure.
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float).ravel()
    if G.size == 0 or G.shape[0] == 0:
        return bool(np.all(np.asarray(lb) <= np.asarray(ub)))
    n = G.shape[1]
    A = np.hstack([G, -np.ones((G.shape[0], 1))])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    bounds = [(float(l) if np.isfinite(l) else None,
               float(u) if np.isfinite(u) else None)
              for l, u in zip(lb, ub)] + [(None, None)]
    res = linprog(c, A_ub=A, b_ub=h, bounds=bounds, method="highs")
    if res.status == 3:      # unbounded margin: feasible with slack to spare
        return True
    if res.status != 0:
        return False
    return bool(res.fun <= 1e-9)
