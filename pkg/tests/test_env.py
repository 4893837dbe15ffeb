import math

import numpy as np
import pytest

from lfrl import env as envmod
from lfrl.env import (BUILTIN_WORLDS, EpisodeError, NavWorld, Obstacle, WorldSpec, WorldSpecError, builtin_world,
                      load_world, raycast, save_world, wrap_angle)


def empty_world(**kw):
    return WorldSpec(name="t", bounds=(0.0, 0.0, 4.0, 4.0), **kw)


@pytest.mark.parametrize("name", BUILTIN_WORLDS)
def test_builtin_worlds_load_and_roundtrip(name, tmp_path):
    spec = builtin_world(name)
    save_world(spec, tmp_path / "w.json")
    assert load_world(tmp_path / "w.json") == spec


def test_unknown_world_and_bad_file(tmp_path):
    with pytest.raises(WorldSpecError):
        builtin_world("nope")
    p = tmp_path / "bad.json"
    p.write_text('{"format_version": 99}')
    with pytest.raises(WorldSpecError):
        load_world(p)


def test_wrap_angle_range():
    for a in np.linspace(-20, 20, 401):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_raycast_in_empty_room_hits_walls():
    spec = empty_world()
    r = raycast((2.0, 2.0, 0.0), spec)
    assert r.shape == (envmod.N_BEAMS,)
    assert r[envmod.CENTER_BEAM] == pytest.approx(2.0)  # straight ahead to the east wall
    assert r[0] == pytest.approx(2.0)  # rightmost beam points south
    assert np.all(r >= envmod.RANGE_MIN) and np.all(r <= envmod.RANGE_MAX)


def test_raycast_sees_circle_and_rectangle():
    circle = Obstacle("circle", x=3.0, y=2.0, radius=0.25)
    r = raycast((2.0, 2.0, 0.0), empty_world(obstacles=[circle]))
    assert r[envmod.CENTER_BEAM] == pytest.approx(0.75)
    rect = Obstacle("rect", x=2.5, y=1.5, width=0.5, height=1.0)
    r = raycast((2.0, 2.0, 0.0), empty_world(obstacles=[rect]))
    assert r[envmod.CENTER_BEAM] == pytest.approx(0.5)


def test_ranges_are_clamped():
    circle = Obstacle("circle", x=2.16, y=2.0, radius=0.04)  # surface 0.12 ahead
    r = raycast((2.0, 2.0, 0.0), empty_world(obstacles=[circle]))
    assert r[envmod.CENTER_BEAM] == envmod.RANGE_MIN


def test_reset_is_deterministic_per_seed():
    w = NavWorld(builtin_world("env-2"))
    a = w.reset(11).to_vector()
    g = w.goal
    b = w.reset(11).to_vector()
    np.testing.assert_array_equal(a, b)
    assert w.goal == g
    w.reset(12)
    assert w.goal != g


def test_goals_are_clear_of_obstacles():
    spec = builtin_world("env-2")
    w = NavWorld(spec)
    for seed in range(200):
        w.reset(seed)
        gx, gy = w.goal
        assert not envmod._collides(gx, gy, spec.robot_radius, spec.bounds, spec.obstacles)
        assert math.hypot(gx - 2.0, gy - 2.0) >= spec.min_goal_distance


def test_step_kinematics_and_reward():
    spec = empty_world(goal_region={"kind": "fixed", "point": [3.5, 2.0]})
    w = NavWorld(spec)
    w.reset(0)
    d0 = w.goal_distance
    res = w.step(2)  # straight
    assert w.pose[0] == pytest.approx(2.0 + envmod.STEP_LENGTH)
    assert res.reward == pytest.approx(15.0 * (d0 - w.goal_distance) - 0.1)
    assert res.terminal == "none"
    w.step(0)
    assert w.pose[2] == pytest.approx(-math.radians(30))


def test_goal_and_collision_terminate():
    w = NavWorld(empty_world(goal_region={"kind": "fixed", "point": [2.6, 2.0]}))
    w.reset(0)
    outcomes = [w.step(2) for _ in range(3)]
    assert outcomes[-1].terminal == "goal" and outcomes[-1].reward == 200.0
    with pytest.raises(EpisodeError):
        w.step(2)
    w = NavWorld(empty_world(goal_region={"kind": "fixed", "point": [1.0, 1.0]}))
    w.reset(0)
    res = None
    for _ in range(20):
        res = w.step(2)  # drive east into the wall
        if res.terminal != "none":
            break
    assert res.terminal == "collision" and res.reward == -200.0


def test_collision_is_consistent_with_lidar_in_static_worlds():
    """A short front beam means a straight step collides; long beams all round mean it cannot."""
    rng = np.random.default_rng(0)
    checked = 0
    for name in ("env-1", "env-2", "env-4", "test-env-1"):
        spec = builtin_world(name)
        reach = envmod.STEP_LENGTH + spec.robot_radius
        w = NavWorld(spec)
        for _ in range(300):
            w.reset(int(rng.integers(1 << 30)))
            for _ in range(int(rng.integers(0, 20))):
                if w.step(int(rng.integers(5))).terminal != "none":
                    break
            if not w._active or w.goal_distance < 0.6:
                continue
            ranges = w.observe().ranges
            res = w.step(2)
            if ranges[envmod.CENTER_BEAM] < reach:
                assert res.terminal == "collision", name
                checked += 1
            if ranges.min() > reach + 0.3:
                assert res.terminal != "collision", name
    assert checked > 0


def test_moving_obstacles_stay_inside_and_bounce():
    spec = builtin_world("env-3")
    w = NavWorld(spec)
    w.reset(0)
    start = list(w.positions)
    for _ in range(300):
        w.advance_obstacles()
        for (x, y), ob in zip(w.positions, spec.obstacles):
            assert ob.radius <= x <= 4 - ob.radius and ob.radius <= y <= 4 - ob.radius
    assert w.positions != start


def test_timeout_uses_mode_cap():
    w = NavWorld(empty_world())
    w.reset(0, mode="test")
    assert w.step_cap == envmod.TEST_STEP_CAP
    w.reset(0)
    assert w.step_cap == envmod.TRAIN_STEP_CAP
    with pytest.raises(ValueError):
        w.reset(0, mode="eval")


def test_invalid_action():
    w = NavWorld(empty_world())
    w.reset(0)
    with pytest.raises(ValueError):
        w.step(5)


def test_observation_layout():
    w = NavWorld(builtin_world("env-1"))
    v = w.reset(3).to_vector()
    layout = envmod.raw_layout(builtin_world("env-1"))
    assert v.shape == (envmod.OBS_DIM,) == (layout.dim,)
    assert np.all(v >= layout.low) and np.all(v <= layout.high)


def ray_rectangle_oracle(px, py, angle, x0, y0, x1, y1):
    dx, dy = math.cos(angle), math.sin(angle)
    hits = []
    if dx > 1e-12:
        hits.append((x1 - px) / dx)
    if dx < -1e-12:
        hits.append((x0 - px) / dx)
    if dy > 1e-12:
        hits.append((y1 - py) / dy)
    if dy < -1e-12:
        hits.append((y0 - py) / dy)
    return min(max(min(hits), 0.13), 4.0)


def test_empty_room_ranges_match_ray_rectangle_oracle():
    spec = builtin_world("env-1")
    w = NavWorld(spec)
    obs = w.reset(3)
    x, y, heading = w.pose
    expected = [ray_rectangle_oracle(x, y, heading + math.radians(-90 + 18 * i), *spec.bounds) for i in range(10)]
    np.testing.assert_allclose(obs.ranges, expected, rtol=0, atol=1e-9)


def test_circle_dead_ahead_and_behind():
    ahead = Obstacle("circle", x=3.6, y=2.0, radius=0.1)  # surface 1.5 m ahead
    r = raycast((2.0, 2.0, 0.0), empty_world(obstacles=[ahead]))
    assert abs(r[envmod.CENTER_BEAM] - 1.5) <= 1e-9
    behind = Obstacle("circle", x=1.0, y=2.0, radius=0.3)
    np.testing.assert_array_equal(raycast((2.0, 2.0, 0.0), empty_world(obstacles=[behind])),
                                  raycast((2.0, 2.0, 0.0), empty_world()))


def test_far_walls_clamp_to_max_range():
    big = WorldSpec(name="hall", bounds=(0.0, 0.0, 10.0, 10.0))
    np.testing.assert_array_equal(raycast((5.0, 5.0, 0.3), big), np.full(envmod.N_BEAMS, envmod.RANGE_MAX))


def test_test_mode_episode_times_out_at_1000_steps():
    w = NavWorld(empty_world(goal_region={"kind": "fixed", "point": [0.5, 0.5]}))
    w.reset(0, mode="test")
    res = None
    for _ in range(envmod.TEST_STEP_CAP):
        res = w.step(4)  # tight left circle around the start
    assert res.terminal == "timeout" and w.steps == 1000


@pytest.mark.parametrize("name", ["env-3", "test-env-2", "test-env-3"])
def test_patrols_stay_in_bounds_for_100k_ticks(name):
    spec = builtin_world(name)
    w = NavWorld(spec)
    w.reset(0)
    x0, y0, x1, y1 = spec.bounds
    for _ in range(100_000):
        w.advance_obstacles()
        for (px, py), ob in zip(w.positions, spec.obstacles):
            if ob.kind == "circle":
                assert x0 + ob.radius - 1e-9 <= px <= x1 - ob.radius + 1e-9
                assert y0 + ob.radius - 1e-9 <= py <= y1 - ob.radius + 1e-9
            else:
                assert x0 - 1e-9 <= px <= x1 - ob.width + 1e-9 and y0 - 1e-9 <= py <= y1 - ob.height + 1e-9
