import math

import numpy as np
import pytest

from safelab import demos, env
from safelab.demos import (PidState, WaypointPlan, default_plan, fly_by_point, goal_capture_speed,
                           pid_accel, spb_constraint_action, spb_goal_action, track_to_point,
                           turn_geometry)


def test_goal_action_fixed_point_and_clip():
    plan = WaypointPlan(((0, 0), (5, 5), (10, 5), (20, 5)))
    assert np.allclose(spb_goal_action(0, (5, 5), plan, 1.0), 0.0)
    far = WaypointPlan(((0, 0), (500, 0), (600, 0), (700, 0)))
    assert np.allclose(spb_goal_action(0, (0, 0), far, 1.0), [1.0, 0.0])


def test_goal_action_schedule():
    plan = WaypointPlan(((0, 0), (10, 0), (0, 10), (20, 20)))
    s = (5.0, 5.0)
    assert np.allclose(spb_goal_action(19, s, plan, 100), [5, -5])
    assert np.allclose(spb_goal_action(20, s, plan, 100), [-5, 5])


def test_constraint_action_schedule():
    s, s_d, s_c = (0.0, 0.0), (-3.0, 0.0), (3.0, 0.0)
    assert spb_constraint_action(14, s, s_d, s_c, 1.0)[0] < 0
    assert spb_constraint_action(15, s, s_d, s_c, 1.0)[0] > 0


def test_pid_examples():
    assert np.allclose(pid_accel(PidState(5.0, 0.05, 0.0), np.zeros(2)), 0.0)
    out = pid_accel(PidState(5.0, 0.05, 0.0), np.ones(2), dt=1.0)
    assert np.allclose(out, 5.0 + 0.05)
    pid = PidState(0.0, 0.0, 4.0)
    pid_accel(pid, np.zeros(2))
    assert np.allclose(pid_accel(pid, np.ones(2), dt=1.0), 4.0)
    with pytest.raises(ValueError):
        pid_accel(pid, np.ones(2), dt=0.0)


def test_turn_geometry():
    assert turn_geometry((0, 0), (1, 0), (2, 0))[2] == pytest.approx(0.0)
    assert turn_geometry((0, 0), (1, 0), (1, 1))[2] == pytest.approx(math.pi / 2)
    assert turn_geometry((0, 0), (1, 0), (1, -1))[2] == pytest.approx(-math.pi / 2)


def test_track_to_point_on_track_and_switch():
    a, b, c = (0.0, 0.0), (20.0, 0.0), (20.0, 20.0)
    heading, switch = track_to_point((5.0, 0.0), a, b, c, r=5.0)
    assert heading == pytest.approx(0.0) and not switch
    # right-angle turn with r = 5: entry point z = b - 5 q
    _, before = track_to_point((14.9, 0.0), a, b, c, r=5.0)
    _, after = track_to_point((15.1, 0.0), a, b, c, r=5.0)
    assert not before and after


def test_fly_by_point_tangent_heading():
    a, b, c = (0.0, 0.0), (20.0, 0.0), (20.0, 20.0)
    centre = np.array([15.0, 5.0])
    s = centre + 5.0 * np.array([0.0, -1.0])
    heading, switch = fly_by_point(s, a, b, c, r=5.0, k_orbit=4.0)
    gamma = -math.pi / 2
    assert heading == pytest.approx(gamma + math.pi / 2)
    assert not switch
    _, switch = fly_by_point((20.0, 5.5), a, b, c, r=5.0)
    assert switch
    assert demos.K_ORBIT == 4.0


def test_goal_capture_speed():
    assert goal_capture_speed(25.0) == pytest.approx(46.875)
    assert goal_capture_speed(5.0) == 0.0
    assert goal_capture_speed(15.0) == 3.0


def test_spb_goal_controller_100_of_100(spb):
    for seed in range(100):
        ep = demos.goal_episode(spb, seed)
        assert ep.reached_goal and not ep.violated
        assert ep.rewards[-1] == 0.0


def test_spb_constraint_controller_violates(spb):
    hits = sum(demos.constraint_episode(spb, seed).violated for seed in range(100))
    assert hits >= 95


def test_svb_navigation_reaches_goal():
    cfg = env.svb_config(noise_std=0.05)
    hits = sum(demos.goal_episode(cfg, seed).reached_goal for seed in range(10))
    assert hits >= 9


def test_generate_demos_counts(spb):
    ds = demos.generate_demos(spb, 25, 25, seed=3)
    assert ds.counts()["offline_gr"] == 25 and ds.counts()["offline_cv"] == 25
    assert all(ep.rewards[-1] == 0.0 for ep in ds.gr)
    empty = demos.generate_demos(spb, 0, 4, seed=3)
    assert empty.gr == [] and len(empty) == 4


def test_default_plan_endpoints():
    for name in env.ENV_FACTORIES:
        cfg = env.make_config(name)
        plan = default_plan(cfg)
        assert plan.points[0] == tuple(cfg.start) and plan.points[-1] == tuple(cfg.goal)
