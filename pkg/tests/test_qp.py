import numpy as np
import pytest

from skillsafe import qp
from skillsafe.errors import NumericalError, SingularKKTError

from oracles import random_instance, reference_objective, grid_objective_2d


def test_unconstrained_minimiser():
    spec = qp.QPSpec.build(H=np.eye(2), F=[-2.0, 0.0])
    sol = qp.solve(spec)
    assert sol.status == qp.OPTIMAL
    assert np.allclose(sol.primal, [1.0, 0.0], atol=1e-12)


def test_single_active_constraint():
    # min u^2 s.t. -u <= -1  ->  u* = 1, lambda* = 2
    spec = qp.QPSpec.build(H=[[1.0]], F=[0.0], G=[[-1.0]], h=[-1.0])
    sol = qp.solve(spec)
    assert sol.status == qp.OPTIMAL
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-12)
    assert sol.dual[0] == pytest.approx(2.0, abs=1e-12)
    assert sol.active_set == [0]


def test_infeasible_rows_detected():
    spec = qp.QPSpec.build(H=[[1.0]], F=[0.0], G=[[1.0], [-1.0]],
                           h=[-1.0, -1.0])
    sol = qp.solve(spec)
    assert sol.status == qp.INFEASIBLE


def test_box_bounds_respected():
    spec = qp.QPSpec.build(H=np.eye(2), F=[-10.0, -10.0],
                           lb=[-1.0, -1.0], ub=[1.0, 2.0])
    sol = qp.solve(spec)
    assert np.allclose(sol.primal, [1.0, 2.0], atol=1e-12)
    assert sol.active_ub == [0, 1]


def test_solution_optimality_conditions():
    rng = np.random.default_rng(3)
    for _ in range(120):
        spec = random_instance(rng)
        sol = qp.solve(spec)
        assert sol.status == qp.OPTIMAL
        x = sol.primal
        # primal feasibility
        if spec.m:
            assert np.all(spec.G @ x <= spec.h + 1e-8)
        assert np.all(x >= spec.lb - 1e-8) and np.all(x <= spec.ub + 1e-8)
        # complementary slackness and dual feasibility
        assert np.all(sol.dual >= 0)
        if spec.m:
            assert np.max(np.abs(sol.dual * (spec.G @ x - spec.h))) < 1e-8
        # stationarity: 2 H x + F + G^T lam + box duals = 0
        grad = 2 * spec.H @ x + spec.F
        if spec.m:
            grad = grad + spec.G.T @ sol.dual
        grad = grad - sol.dual_lb + sol.dual_ub
        assert np.max(np.abs(grad)) < 1e-8


def test_objective_matches_reference_oracle():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(60):
        spec = random_instance(rng, n=4, m=6)
        sol = qp.solve(spec)
        assert sol.status == qp.OPTIMAL
        ref_obj, _, certified = reference_objective(spec)
        if not certified:
            continue
        checked += 1
        assert spec.objective(sol.primal) == pytest.approx(ref_obj, abs=1e-8)
    assert checked >= 50


def test_objective_matches_grid_oracle_2d():
    spec = qp.QPSpec.build(H=[[1.0, 0.2], [0.2, 1.5]], F=[-1.0, 2.0],
                           G=[[1.0, 1.0]], h=[0.5],
                           lb=[-4, -4], ub=[4, 4])
    sol = qp.solve(spec)
    obj_grid, _ = grid_objective_2d(spec)
    assert spec.objective(sol.primal) <= obj_grid + 1e-6


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    spec = random_instance(rng)
    a = qp.solve(spec)
    b = qp.solve(spec)
    assert np.array_equal(a.primal, b.primal)
    assert np.array_equal(a.dual, b.dual)
    assert a.active_set == b.active_set


def test_condition_number_guard():
    H = np.diag([1.0, 1e-14])
    with pytest.raises(NumericalError):
        qp.solve(qp.QPSpec.build(H=H, F=[0.0, 0.0]))


def test_kkt_differentials_unconstrained():
    spec = qp.QPSpec.build(H=2 * np.eye(2), F=[0.0, 0.0])
    sol = qp.solve(spec)
    d = qp.kkt_differentials(spec, sol, np.array([1.0, 0.0]))
    # Hessian of x^T H x is 2H = 4I; adjoint solve of -incoming
    assert np.allclose(d.d_mu, [-0.25, 0.0])
    assert d.d_lambda.size == 0
    zero = qp.kkt_differentials(spec, sol, np.zeros(2))
    assert np.all(zero.d_mu == 0)


def test_kkt_differentials_active_instance():
    spec = qp.QPSpec.build(H=[[1.0]], F=[0.0], G=[[-1.0]], h=[-1.0])
    sol = qp.solve(spec)
    d = qp.kkt_differentials(spec, sol, np.array([1.0]))
    # the pair must satisfy the scaled block system with the -incoming side
    P = 2 * spec.H
    lhs_top = P @ d.d_mu + spec.G.T @ (sol.dual * d.d_lambda)
    lhs_bot = spec.G @ d.d_mu
    assert lhs_top[0] == pytest.approx(-1.0)
    assert lhs_bot[0] == pytest.approx(0.0, abs=1e-12)
    grads = qp.parameter_grads(spec, sol, d.d_mu, d.d_lambda)
    assert grads.dh[0] == pytest.approx(-1.0)   # u* = -h
    assert grads.dF[0] == d.d_mu[0]


def test_parameter_grads_zero_for_inactive_rows():
    spec = qp.QPSpec.build(H=np.eye(2), F=[-2.0, 0.0],
                           G=[[1.0, 0.0], [0.0, 1.0]], h=[0.5, 99.0])
    sol = qp.solve(spec)
    assert sol.active_set == [0]
    d = qp.kkt_differentials(spec, sol, np.array([1.0, 1.0]))
    g = qp.parameter_grads(spec, sol, d.d_mu, d.d_lambda)
    assert np.all(g.dG[1] == 0) and g.dh[1] == 0
    assert np.array_equal(g.dF, d.d_mu)


def _fd_scalar(make_spec, base, incoming, eps=1e-6):
    def value(spec):
        return float(incoming @ qp.solve(spec).primal)
    return (value(make_spec(base + eps)) - value(make_spec(base - eps))) / (2 * eps)


def test_gradients_match_finite_differences_all_blocks():
    rng = np.random.default_rng(6)
    tested = 0
    while tested < 25:
        spec = random_instance(rng, n=3, m=5)
        sol = qp.solve(spec)
        if sol.status != qp.OPTIMAL:
            continue
        slack = spec.h - spec.G @ sol.primal
        lams = np.concatenate([sol.dual, sol.dual_lb, sol.dual_ub])
        active_ok = np.all((sol.dual > 1e-5) | (slack > 1e-5))
        if not active_ok or np.any((lams > 0) & (lams < 1e-5)):
            continue
        tested += 1
        incoming = rng.normal(size=spec.n)
        d = qp.kkt_differentials(spec, sol, incoming)
        g = qp.parameter_grads(spec, sol, d.d_mu, d.d_lambda)

        i, j = rng.integers(0, spec.n, size=2)
        k = int(rng.integers(0, spec.m))

        def with_h(val, kk=k):
            h2 = spec.h.copy()
            h2[kk] = val
            return qp.QPSpec(spec.H, spec.F, spec.G, h2, spec.lb, spec.ub)

        def with_f(val, ii=i):
            f2 = spec.F.copy()
            f2[ii] = val
            return qp.QPSpec(spec.H, f2, spec.G, spec.h, spec.lb, spec.ub)

        def with_hmat(val, ii=i, jj=j):
            H2 = spec.H.copy()
            H2[ii, jj] = val
            return qp.QPSpec(H2, spec.F, spec.G, spec.h, spec.lb, spec.ub)

        def with_g(val, kk=k, jj=j):
            G2 = spec.G.copy()
            G2[kk, jj] = val
            return qp.QPSpec(spec.H, spec.F, G2, spec.h, spec.lb, spec.ub)

        assert _fd_scalar(with_h, spec.h[k], incoming) == pytest.approx(
            g.dh[k], rel=1e-4, abs=1e-6)
        assert _fd_scalar(with_f, spec.F[i], incoming) == pytest.approx(
            g.dF[i], rel=1e-4, abs=1e-6)
        assert _fd_scalar(with_hmat, spec.H[i, j], incoming) == pytest.approx(
            g.dH[i, j], rel=1e-4, abs=1e-6)
        assert _fd_scalar(with_g, spec.G[k, j], incoming) == pytest.approx(
            g.dG[k, j], rel=1e-4, abs=1e-6)


def test_singular_kkt_raises():
    # duplicated rows active together make the reduced system singular
    spec = qp.QPSpec.build(H=[[1.0, 0.0], [0.0, 1.0]], F=[-2.0, 0.0],
                           G=[[1.0, 0.0], [1.0, 0.0]], h=[0.5, 0.5])
    sol = qp.solve(spec)
    lam = sol.dual.copy()
    lam[:] = 0.5   # force both duplicates to appear strictly active
    sol.dual = lam
    sol.active_set = [0, 1]
    with pytest.raises(SingularKKTError):
        qp.kkt_differentials(spec, sol, np.array([1.0, 0.0]))


def test_feasibility_probe():
    assert qp.feasibility_probe(np.zeros((0, 2)), np.zeros(0),
                                np.array([-1, -1]), np.array([1, 1]))
    G = np.array([[1.0], [-1.0]])
    h = np.array([-1.0, -1.0])
    assert not qp.feasibility_probe(G, h, np.array([-5.0]), np.array([5.0]))
    h2 = np.array([2.0, 2.0])
    assert qp.feasibility_probe(G, h2, np.array([-5.0]), np.array([5.0]))
