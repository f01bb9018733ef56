import numpy as np
import pytest

from skillsafe import smdp
from skillsafe.errors import DomainError


def seg(t_abs, k, ret, done=False, agent=0):
    z = np.zeros(2)
    return smdp.SegmentTransition(agent_id=agent, obs_start=z, joint_start=z,
                                  skill_index=0, duration=k, seg_return=ret,
                                  obs_end=z, joint_end=z, done=done,
                                  t_abs=t_abs)


def test_decision_epochs_continue():
    sched = smdp.decision_epochs({"A": [3], "B": [5]})
    assert sched.of("A") == [0, 3]
    assert sched.of("B") == [0, 5]


def test_decision_epochs_timeout_only():
    sched = smdp.decision_epochs({"A": [50]})
    assert sched.of("A") == [0, 50]


def test_decision_epochs_any_and_all():
    any_s = smdp.decision_epochs({"A": [3], "B": [5]}, scheme=smdp.ANY)
    assert any_s.of("A") == [0, 3, 5] and any_s.of("B") == [0, 3, 5]
    all_s = smdp.decision_epochs({"A": [3], "B": [5]}, scheme=smdp.ALL)
    assert all_s.of("A") == [0, 5] and all_s.of("B") == [0, 5]


def test_segment_return():
    assert smdp.segment_return([2.5], 0.1) == 2.5
    assert smdp.segment_return([1, 1, 1], 0.5) == pytest.approx(1.75)
    assert smdp.segment_return([0, 0, 0], 0.9) == 0.0
    with pytest.raises(DomainError):
        smdp.segment_return([], 0.9)
    with pytest.raises(DomainError):
        smdp.segment_return([1.0], 0.0)


def test_trajectory_return_matches_flat_sum():
    gamma = 0.5
    # two back-to-back segments with rewards (1, 1) then (1,)
    s1 = seg(0, 2, smdp.segment_return([1, 1], gamma))
    s2 = seg(2, 1, smdp.segment_return([1], gamma))
    total = smdp.trajectory_return([s1, s2], gamma)
    assert total == pytest.approx(1 + 0.5 + 0.25)


def test_trajectory_return_identity_random():
    rng = np.random.default_rng(0)
    gamma = 0.97
    for _ in range(50):
        rewards = rng.normal(size=int(rng.integers(5, 60)))
        # random segmentation
        cuts = sorted(rng.choice(np.arange(1, len(rewards)),
                                 size=min(4, len(rewards) - 1),
                                 replace=False))
        pieces = np.split(rewards, cuts)
        segs, t = [], 0
        for piece in pieces:
            segs.append(seg(t, len(piece),
                            smdp.segment_return(piece, gamma)))
            t += len(piece)
        flat = sum(gamma ** i * r for i, r in enumerate(rewards))
        assert smdp.trajectory_return(segs, gamma) == pytest.approx(
            flat, abs=1e-10)


def test_gamma_one_reduces_to_plain_sum():
    assert smdp.segment_return([1, 2, 3], 1.0) == 6.0


def test_high_advantage():
    values = {"start": 2.0, "end": 4.0}

    def critic(vec):
        return values["start"] if vec[0] == 0 else values["end"]

    s = seg(0, 2, 1.0)
    s.joint_start = np.array([0.0])
    s.joint_end = np.array([1.0])
    assert smdp.high_advantage(critic, s, 0.5) == pytest.approx(
        1.0 + 0.25 * 4.0 - 2.0)

    s_done = seg(0, 2, 1.0, done=True)
    s_done.joint_start = np.array([0.0])
    s_done.joint_end = np.array([1.0])
    assert smdp.high_advantage(critic, s_done, 0.5) == pytest.approx(1.0 - 2.0)

    zero = lambda vec: 0.0
    assert smdp.high_advantage(zero, s, 0.9) == pytest.approx(s.seg_return)


def test_duration_must_be_positive():
    with pytest.raises(DomainError):
        seg(0, 0, 1.0)
