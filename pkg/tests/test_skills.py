import numpy as np
import pytest

from skillsafe import barriers as bar
from skillsafe import dynamics as dyn
from skillsafe import skills as sk
from skillsafe.harness import rng_for
from skillsafe.observation import (BandGeometry, GoalView, NeighborView,
                                   Observation)

SAFE = bar.SafetyParams(footprint_radius=1.7, speed_gain=0.26,
                        phi_floor=0.5, phi_cap=1.0)
ROAD = dyn.road_params(dt=0.05)
DI = dyn.planar_params()


def road_obs(own, neighbors=(), left=False, right=False, center=0.0,
             band=None):
    return Observation(model=dyn.FRENET, own=own, neighbors=tuple(neighbors),
                       goal=GoalView(100.0, np.array([1.0, 0.0])),
                       band=band or BandGeometry(lo=-1.75, hi=1.75),
                       speed_cap=5.0, left_lane=left, right_lane=right,
                       lane_center=center)


def planar_obs(own, neighbors=(), goal=(3.0, 0.0)):
    g = np.asarray(goal, dtype=float)
    return Observation(model=dyn.DOUBLE_INTEGRATOR, own=own,
                       neighbors=tuple(neighbors),
                       goal=GoalView(float(np.linalg.norm(g)), g),
                       speed_cap=10.0, sensing_radius=3.0)


def neighbor(rel_pos, rel_vel, kind="agent", ref_id=1):
    rel_pos = np.asarray(rel_pos, dtype=float)
    return NeighborView(ref_id=ref_id, kind=kind, rel_pos=rel_pos,
                        rel_vel=np.asarray(rel_vel, dtype=float),
                        distance=float(np.linalg.norm(rel_pos)))


def mid_params(spec):
    lay = spec.param_layout()
    mid = 0.5 * (SAFE.phi_floor + SAFE.phi_cap)
    return bar.QPParams.from_flat(np.full(sum(lay), mid), lay,
                                  floor=SAFE.phi_floor, cap=SAFE.phi_cap)


ROAD_SPECS = sk.catalog("road", safety=SAFE)
PLANAR_SPECS = sk.catalog("planar", safety=SAFE)


def by_id(specs, sid):
    return next(s for s in specs if s.skill_id == sid)


def test_catalog_contents():
    assert [s.skill_id for s in ROAD_SPECS] == list(sk.ROAD_SKILLS)
    assert [s.skill_id for s in PLANAR_SPECS] == list(sk.PLANAR_SKILLS)
    assert all(s.t_max >= 1 for s in ROAD_SPECS + PLANAR_SPECS)


def test_initiable_rules():
    cruise = by_id(ROAD_SPECS, "cruise")
    acc = by_id(ROAD_SPECS, "accelerate")
    yld = by_id(ROAD_SPECS, "yield")
    lcl = by_id(ROAD_SPECS, "lane_change_left")
    fast = road_obs(dyn.BicycleFrenetState(0, 0, 0, 5.0))
    slow = road_obs(dyn.BicycleFrenetState(0, 0, 0, 0.5))
    assert sk.is_initiable(cruise, fast) and sk.is_initiable(cruise, slow)
    assert not sk.is_initiable(acc, fast)          # at the speed cap
    assert sk.is_initiable(acc, slow)
    assert not sk.is_initiable(yld, slow)          # would go below zero
    assert sk.is_initiable(yld, fast)
    assert not sk.is_initiable(lcl, road_obs(dyn.BicycleFrenetState(0, 0, 0, 2)))
    assert sk.is_initiable(lcl, road_obs(dyn.BicycleFrenetState(0, 0, 0, 2),
                                         left=True))


def test_accelerate_headway_gate():
    acc = by_id(ROAD_SPECS, "accelerate")
    own = dyn.BicycleFrenetState(0, 0, 0, 2.0)
    close = road_obs(own, [neighbor([2.5, 0.0], [0, 0])])
    far = road_obs(own, [neighbor([12.0, 0.0], [0, 0])])
    behind = road_obs(own, [neighbor([-2.5, 0.0], [0, 0])])
    assert not sk.is_initiable(acc, close)
    assert sk.is_initiable(acc, far)
    assert sk.is_initiable(acc, behind)   # gate looks ahead only


def test_termination_rules():
    acc = by_id(ROAD_SPECS, "accelerate")
    obs0 = road_obs(dyn.BicycleFrenetState(0, 0, 0, 2.0))
    rt = sk.initiate(acc, obs0, t=10)
    assert rt.v_des == pytest.approx(3.0)
    assert sk.terminate(acc, rt, obs0, 11) == 0
    hit = road_obs(dyn.BicycleFrenetState(1, 0, 0, 3.0))
    assert sk.terminate(acc, rt, hit, 12) == 1
    # timeout branch
    assert sk.terminate(acc, rt, obs0, 10 + acc.t_max) == 1


def test_cruise_terminates_on_distance():
    cruise = by_id(ROAD_SPECS, "cruise")
    obs0 = road_obs(dyn.BicycleFrenetState(5.0, 0, 0, 3.0))
    rt = sk.initiate(cruise, obs0, t=0)
    assert sk.terminate(cruise, rt,
                        road_obs(dyn.BicycleFrenetState(14.0, 0, 0, 3.0)), 5) == 0
    assert sk.terminate(cruise, rt,
                        road_obs(dyn.BicycleFrenetState(15.1, 0, 0, 3.0)), 6) == 1


def test_build_qp_cruise_centered_counts():
    cruise = by_id(ROAD_SPECS, "cruise")
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 3.0))
    rt = sk.initiate(cruise, obs, 0)
    build = sk.build_qp(cruise, rt, obs, mid_params(cruise), ROAD)
    # centered in lane: two boundary rows, one velocity row
    assert build.hard_rows == 2
    assert build.qp_spec.m == 3
    assert build.qp_spec.n == 3       # two controls plus one slack
    assert rt.v_des == pytest.approx(3.0)


def test_build_qp_accelerate_with_neighbor():
    acc = by_id(ROAD_SPECS, "accelerate")
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 2.0),
                   [neighbor([12.0, 0.0], [-0.5, 0.0])])
    rt = sk.initiate(acc, obs, 0)
    build = sk.build_qp(acc, rt, obs, mid_params(acc), ROAD)
    assert build.hard_rows == 3       # one neighbor plus two boundary rows
    assert build.qp_spec.m == 4
    assert rt.v_des == pytest.approx(3.0)


def test_build_qp_lane_change_has_heading_row():
    lcl = by_id(ROAD_SPECS, "lane_change_left")
    obs = road_obs(dyn.BicycleFrenetState(0, -3.5, 0, 3.0), left=True,
                   center=-3.5,
                   band=BandGeometry(lo=-5.25, hi=1.75))
    rt = sk.initiate(lcl, obs, 0)
    assert rt.d_target == pytest.approx(0.0)
    build = sk.build_qp(lcl, rt, obs, mid_params(lcl), ROAD)
    assert build.qp_spec.m == 4       # 2 boundary + velocity + heading
    assert build.qp_spec.n == 4       # 2 controls + 2 slacks


def test_build_qp_planar_turn():
    tl = by_id(PLANAR_SPECS, "turn_left")
    own = dyn.DoubleIntegratorState(0, 0, 1.5, 0.0)
    obs = planar_obs(own, [neighbor([2.0, 0.5], [0, 0]),
                           neighbor([0.0, -1.5], [0, 0], kind="obstacle",
                                    ref_id=-1000)])
    rt = sk.initiate(tl, obs, 0)
    assert rt.theta_des == pytest.approx(tl.magnitude)
    assert np.linalg.norm(rt.v_vec_des) == pytest.approx(1.5)
    build = sk.build_qp(tl, rt, obs, mid_params(tl), DI)
    assert build.hard_rows == 2
    assert build.qp_spec.m == 3


def test_act_stationary_cruise_zero_control():
    cruise = by_id(ROAD_SPECS, "cruise")
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 0.0))
    rt = sk.initiate(cruise, obs, 0)
    res = sk.act(cruise, rt, obs, mid_params(cruise), ROAD)
    assert res.status == "optimal"
    assert np.allclose(res.control, 0.0, atol=1e-9)
    assert res.events == ()


def test_act_respects_hard_rows():
    acc = by_id(ROAD_SPECS, "accelerate")
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 2.0),
                   [neighbor([5.0, 0.0], [-1.0, 0.0])])
    rt = sk.initiate(acc, obs, 0)
    build = sk.build_qp(acc, rt, obs, mid_params(acc), ROAD)
    res = sk.act(acc, rt, obs, mid_params(acc), ROAD)
    assert res.status == "optimal"
    x = np.concatenate([res.control,
                        res.solution.primal[2:]])
    resid = build.qp_spec.G[:build.hard_rows] @ x \
        - build.qp_spec.h[:build.hard_rows]
    assert np.all(resid <= 1e-8)


def test_act_infeasible_falls_back():
    # synthetic contradiction: two stopped agents overlapping ahead/behind
    # with inward closure faster than any admissible braking can offset
    acc = by_id(ROAD_SPECS, "accelerate")
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 4.0),
                   [neighbor([2.2, 0.0], [-4.0, 0.0]),
                    neighbor([-2.2, 0.0], [4.0, 0.0], ref_id=2)])
    rt = sk.initiate(by_id(ROAD_SPECS, "cruise"), obs, 0)
    res = sk.act(by_id(ROAD_SPECS, "cruise"), rt, obs,
                 mid_params(by_id(ROAD_SPECS, "cruise")), ROAD)
    assert res.status != "optimal"
    kinds = {e.kind for e in res.events}
    assert kinds == {sk.INFEASIBLE_QP, sk.FALLBACK_APPLIED}
    lo, hi = dyn.control_bounds(dyn.FRENET, ROAD)
    assert np.all(res.control >= lo) and np.all(res.control <= hi)
    assert res.control[0] == lo[0]    # maximum braking


def test_act_deterministic():
    acc = by_id(ROAD_SPECS, "accelerate")
    obs = road_obs(dyn.BicycleFrenetState(0, 0.3, 0.05, 2.0),
                   [neighbor([9.0, -1.0], [-0.4, 0.1])])
    rt = sk.initiate(acc, obs, 0)
    p = mid_params(acc)
    a = sk.act(acc, rt, obs, p, ROAD)
    b = sk.act(acc, rt, obs, p, ROAD)
    assert np.array_equal(a.control, b.control)


def test_intrinsic_reward_values():
    acc = by_id(ROAD_SPECS, "accelerate")
    spec = sk.SkillSpec(skill_id="accelerate", catalog="road", magnitude=1.0,
                        intrinsic_coeffs=(0.1, 0.0, 0.0, 0.0), safety=SAFE)
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 1.0))
    rt = sk.initiate(spec, obs, 0)
    rt.v_des = 1.0
    r = sk.intrinsic_reward(spec, rt, obs.own, np.array([1.0, 0.0]), obs)
    assert r == pytest.approx(-0.1)

    spec2 = sk.SkillSpec(skill_id="accelerate", catalog="road", magnitude=1.0,
                         intrinsic_coeffs=(0.0, 1.0, 0.0, 0.0), safety=SAFE)
    obs2 = road_obs(dyn.BicycleFrenetState(0, 0, 0, 2.0))
    rt2 = sk.initiate(spec2, obs2, 0)
    rt2.v_des = 1.0
    r2 = sk.intrinsic_reward(spec2, rt2, obs2.own, np.zeros(2), obs2)
    assert r2 == pytest.approx(-1.0)

    # all penalties zero when on target
    spec3 = sk.SkillSpec(skill_id="cruise", catalog="road",
                         intrinsic_coeffs=(0.1, 1.0, 0.5, 0.5), safety=SAFE)
    obs3 = road_obs(dyn.BicycleFrenetState(0, 0, 0, 2.0))
    rt3 = sk.initiate(spec3, obs3, 0)
    assert sk.intrinsic_reward(spec3, rt3, obs3.own, np.zeros(2), obs3) == 0.0


def test_intrinsic_low_speed_guard():
    spec = sk.SkillSpec(skill_id="yield", catalog="road", magnitude=1.0,
                        intrinsic_coeffs=(0.0, 1.0, 0.0, 0.0), safety=SAFE)
    obs = road_obs(dyn.BicycleFrenetState(0, 0, 0, 0.05))
    rt = sk.initiate(spec, obs, 0)
    rt.v_des = 0.01     # below the relative-error guard
    r = sk.intrinsic_reward(spec, rt, obs.own, np.zeros(2), obs)
    assert r == pytest.approx(-(0.05 - 0.01) ** 2)


def test_skill_totality_randomized():
    """Randomized executions all terminate within t_max and controls stay
    inside the dynamics box (smaller copy of the acceptance property)."""
    rng = rng_for(0, 55)
    specs = ROAD_SPECS
    lo, hi = dyn.control_bounds(dyn.FRENET, ROAD)
    for trial in range(200):
        spec = specs[int(rng.integers(len(specs)))]
        state = dyn.BicycleFrenetState(
            p=float(rng.uniform(0, 80)), d=float(rng.uniform(-1.2, 1.2)),
            psi=float(rng.uniform(-0.3, 0.3)), v=float(rng.uniform(0, 5)))
        obs = road_obs(state, left=bool(rng.integers(2)))
        if not sk.is_initiable(spec, obs):
            continue
        rt = sk.initiate(spec, obs, 0)
        params = mid_params(spec)
        state_t = state
        for t in range(1, spec.t_max + 1):
            res = sk.act(spec, rt, road_obs(state_t), params, ROAD)
            assert np.all(res.control >= lo - 1e-12)
            assert np.all(res.control <= hi + 1e-12)
            state_t = dyn.step(dyn.FRENET, state_t, res.control, ROAD)
            if sk.terminate(spec, rt, road_obs(state_t), t):
                break
        else:
            pytest.fail("skill failed to terminate within t_max")
