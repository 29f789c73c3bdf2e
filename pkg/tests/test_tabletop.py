import math

import numpy as np
import pytest

from oracles import inside_polygon, raster_min_y
from pushgrasp import shapes as S
from pushgrasp import tabletop as T

CFG = T.EnvConfig()


def _square(side=0.2, beveled=False, offset=(0.0, 0.0)):
    sq = S.make_shape("square", side)
    sq.beveled = beveled
    sq.com_offset = np.array(offset, dtype=float)
    return sq


def _state(ox, oy, gx, gy, theta=0.0, oz=None):
    return T.EnvState(T.ObjectState(ox, oy, CFG.object_rest_z if oz is None else oz, theta),
                      T.GripperState(gx, gy, CFG.push_z))


def _placed_env(shape, ox, oy, gx, gy, theta=0.0):
    env = T.TabletopEnv()
    env.reset(0, shape)
    env.state = _state(ox, oy, gx, gy, theta)
    return env


# ---------------------------------------------------------------------------
# stage clock


def test_stage_partition():
    assert T.PUSH_STEPS + T.TRANSIT_STEPS + T.GRASP_STEPS + T.LIFT_STEPS == 320
    stages = [T.stage_of(t) for t in range(320)]
    assert stages.count(T.Stage.PUSH) == 144
    assert stages.count(T.Stage.TRANSIT) == 48
    assert stages.count(T.Stage.GRASP) == 84
    assert stages.count(T.Stage.LIFT) == 44
    assert stages == sorted(stages)
    assert T.stage_of(143) is T.Stage.PUSH and T.stage_of(144) is T.Stage.TRANSIT
    assert T.stage_of(191) is T.Stage.TRANSIT and T.stage_of(192) is T.Stage.GRASP
    assert T.stage_of(275) is T.Stage.GRASP and T.stage_of(276) is T.Stage.LIFT
    with pytest.raises(ValueError):
        T.stage_of(320)


def test_config_invariants():
    with pytest.raises(ValueError):
        T.EnvConfig(danger_y=0.82)
    with pytest.raises(ValueError):
        T.EnvConfig(good_zone=(0.835, 0.9))


# ---------------------------------------------------------------------------
# reward


def _reward(t, ox, oy, gx, oz=None, fallen=False, before_fallen=False, danger=False):
    before = _state(ox, oy, gx, 1.2)
    before.obj.fallen = before_fallen
    before.danger_fired = danger
    after = _state(ox, oy, gx, 1.2, oz=oz)
    after.obj.fallen = fallen
    return T.compute_reward(before, after, T.StageClock(t))


def test_alignment_term():
    assert _reward(10, 0.6, 1.0, 0.5).r_c == pytest.approx(-0.25)
    assert _reward(10, 0.5, 1.0, 0.5).r_c == 0.0
    assert _reward(200, 0.6, 1.0, 0.5).r_c == pytest.approx(-0.25)
    assert _reward(150, 0.6, 1.0, 0.5).r_c == 0.0
    assert _reward(300, 0.6, 1.0, 0.5).r_c == 0.0


@pytest.mark.parametrize("oy,expected", [(0.8501, 1.0), (0.85, 0.0), (0.8999, 1.0), (0.9, 0.0), (0.95, 0.0)])
def test_zone_boundaries(oy, expected):
    assert _reward(143, 0.5, oy, 0.5).r_p == expected
    assert _reward(142, 0.5, oy, 0.5).r_p == 0.0


@pytest.mark.parametrize("oy,expected", [(0.8399, -1.0), (0.84, 0.0)])
def test_danger_boundary(oy, expected):
    r = _reward(20, 0.5, oy, 0.5)
    assert r.r_p == expected
    assert r.danger_flag_consumed == (expected != 0)
    # one-shot
    assert _reward(21, 0.5, oy, 0.5, danger=True).r_p == 0.0


@pytest.mark.parametrize("oz,expected", [(0.8301, 5.0), (0.83, 0.0)])
def test_lifted_boundary(oz, expected):
    assert _reward(319, 0.5, 0.87, 0.5, oz=oz).r_g == expected
    assert _reward(318, 0.5, 0.87, 0.5, oz=oz).r_g == 0.0


def test_fallen_threshold():
    env = _placed_env(_square(), 0.5, 0.835, 0.5, 0.955)
    env.step([0, -1, 0])  # crosses the edge and starts to tip
    zs = [env.state.obj.z]
    fallen = [env.state.obj.fallen]
    while not env.state.done:
        env.step([0, 0, 0])
        zs.append(env.state.obj.z)
        fallen.append(env.state.obj.fallen)
    for z, f in zip(zs, fallen):
        assert f == (z < CFG.fallen_z)
    assert fallen[-1]


def test_fall_termination_penalty():
    env = _placed_env(_square(), 0.5, 0.95, 0.5, 1.07)
    fall_rewards = []
    done = False
    while not done:
        _, r, done, info = env.step([0, -1, 0])
        assert r.total == r.r_p + r.r_g + r.r_c
        fall_rewards.append(r.r_p)
    assert info["fallen"] and env.state.obj.z < 0.7
    assert env.state.clock.t < 144
    assert fall_rewards[-1] == -1.0
    assert fall_rewards.count(-1.0) == 2  # first danger entry, then the fall


def test_perfect_rollout_total_is_six():
    env = _placed_env(_square(), 0.5, 1.0, 0.5, 1.12)
    total = 0.0
    rcs = []
    done = False
    while not done:
        stage = env.state.clock.stage
        a1 = -1.0 if stage is T.Stage.PUSH and env.state.obj.y > 0.875 else 0.0
        _, r, done, info = env.step([0.0, a1, 0.0])
        rcs.append(r.r_c)
        total += r.total
    assert all(rc == 0.0 for rc in rcs)
    assert info["success"] and info["o_z"] == pytest.approx(0.89)
    assert total == 6.0


def test_step_after_done_rejected():
    env = T.TabletopEnv()
    env.reset(1, _square())
    env.state.clock.t = 319
    env.step([0, 0, 0])
    with pytest.raises(T.EpisodeDone):
        env.step([0, 0, 0])


def test_zero_action_episode():
    env = _placed_env(_square(), 0.5, 1.15, 0.5, 1.27)
    start = (env.state.obj.x, env.state.obj.y, env.state.obj.theta)
    n = 0
    done = False
    while not done:
        _, r, done, _ = env.step([0, 0, 0])
        n += 1
        assert r.r_g == 0.0
    o = env.state.obj
    assert (o.x, o.y, o.theta) == start and n == 320


# ---------------------------------------------------------------------------
# push mechanics


def test_push_through_com_is_pure_translation():
    s = _state(0.5, 1.0, 0.5, 1.0 + 0.1 + 0.02 + 0.001)
    for _ in range(5):
        s = T.apply_push((0.0, -0.01), s, _square())
    assert s.obj.theta == 0.0 and s.obj.x == 0.5
    assert s.obj.y < 1.0


@pytest.mark.parametrize("offset", [0.05, -0.05])
def test_offset_push_rotates_with_cross_product_sign(offset):
    s = _state(0.5, 1.0, 0.5 + offset, 1.0 + 0.1 + 0.02 - 0.004)
    # contact on the top face, normal -y: (c - com) x n = dx * (-1) - 0.1 * 0
    new = T.apply_push((0.0, 0.0), s, _square())
    depth = 0.004
    arm = math.hypot(offset, 0.1)
    expected = CFG.rotation_gain * depth * (-offset) / arm
    assert new.obj.theta == pytest.approx(expected, rel=1e-9)


def test_bevel_slip_reduces_transfer():
    flat = T.apply_push((0.0, 0.0), _state(0.5, 1.0, 0.5, 1.116), _square())
    bev = T.apply_push((0.0, 0.0), _state(0.5, 1.0, 0.5, 1.116), _square(beveled=True))
    assert 1.0 - flat.obj.y == pytest.approx(0.004, abs=1e-12)
    assert 1.0 - bev.obj.y == pytest.approx(0.65 * 0.004, abs=1e-12)


def test_apply_push_bounds_displacement():
    with pytest.raises(ValueError):
        T.apply_push((0.02, 0.0), _state(0.5, 1.0, 0.5, 1.2), _square())


def _penetration(state, shape):
    w = T.world_polygon(state.obj, shape)
    depth, *_ = T._geom.disc_penetration(w, state.gripper.x, state.gripper.y, CFG.gripper_radius)
    return depth


@pytest.mark.parametrize("idx", [0, 13, 27, 40, 55, 79])
def test_push_invariants_random_actions(idx):
    shape = S.training_set()[idx]
    rng = np.random.default_rng(idx)
    env = T.TabletopEnv()
    env.reset(rng, shape)
    tipped = False
    for t in range(144):
        o = env.state.obj
        g = env.state.gripper
        before_o = np.array([o.x, o.y])
        before_g = np.array([g.x, g.y])
        # bias toward the object so contact actually happens
        toward = np.clip(np.array([o.x - g.x, o.y - g.y]) * 30.0, -1, 1)
        a = np.clip(toward + rng.normal(0, 0.5, 2), -1, 1)
        _, r, done, info = env.step([a[0], a[1], a[0]])
        o = env.state.obj
        assert r.total == r.r_p + r.r_g + r.r_c
        if o.tipping:
            tipped = True
        else:
            assert not tipped  # never returns to the table
            assert _penetration(env.state, shape) <= 1e-6
            moved = np.hypot(*(np.array([o.x, o.y]) - before_o))
            assert moved <= np.hypot(*(a * CFG.action_scale)) + 1e-12
        assert np.all(np.abs(np.array([g.x, g.y]) - before_g) <= CFG.action_scale + 1e-12)
        if done:
            break


def test_scripted_push_bound():
    env = _placed_env(_square(), 0.5, 1.2, 0.5, 1.32)
    ys = [env.state.obj.y]
    for _ in range(30):  # stays on the table
        env.step([0, -1, 0])
        ys.append(env.state.obj.y)
    steps = -np.diff(ys)
    assert np.all(steps >= 0) and np.all(steps <= 0.01 + 1e-12)
    assert steps[-1] == pytest.approx(0.01)


# ---------------------------------------------------------------------------
# overhang, tipping, grasp


def test_overhang_examples():
    sq = _square()
    assert T.compute_overhang(T.ObjectState(0.5, 0.95, 0.81, 0.0), sq) == (0.0, None)
    over, interval = T.compute_overhang(T.ObjectState(0.5, 0.88, 0.81, 0.0), sq)
    assert over == pytest.approx(0.05)
    np.testing.assert_allclose(interval, (0.4, 0.6))


def test_overhang_matches_raster_oracle():
    rng = np.random.default_rng(11)
    pool = S.training_set() + S.irregular_test_set() + S.beveled_test_set()
    for _ in range(100):
        shape = pool[rng.integers(len(pool))]
        obj = T.ObjectState(0.5, float(rng.uniform(0.8, 1.0)), 0.81, float(rng.uniform(-np.pi, np.pi)))
        over, _ = T.compute_overhang(obj, shape)
        oracle = max(0.0, CFG.table_edge_y - raster_min_y(T.world_polygon(obj, shape), 1e-3))
        assert abs(over - oracle) <= 2e-3


def test_tip_examples():
    sq = _square()
    assert not T.check_tip(T.ObjectState(0.5, 0.84, 0.81, 0.0), sq)
    assert T.check_tip(T.ObjectState(0.5, 0.825, 0.81, 0.0), sq)
    ell = S.irregular_test_set()[0]
    ell.com_offset = np.array([0.0, -0.04])
    com = S.polygon_properties(ell, pose=(0.5, 0.86, 0.0), incircle_step=0.01).world_com
    assert com[1] == pytest.approx(0.82)
    assert T.check_tip(T.ObjectState(com[0], com[1], 0.81, 0.0), ell)


def _grasp_state(gx, com_x=0.5, offset=0.0):
    s = _state(com_x, 0.88, gx, CFG.grasp_start[1])
    return s, _square(offset=(offset, 0.0))


def test_grasp_examples():
    s, sq = _grasp_state(0.5)
    assert T.check_grasp(s, sq)
    s, sq = _grasp_state(0.395)
    assert not T.check_grasp(s, sq)
    # slice stays [0.4, 0.6] with the COM pushed to x = 0.58
    s, sq = _grasp_state(0.45, com_x=0.58, offset=0.08)
    np.testing.assert_allclose(T.compute_overhang(s.obj, sq)[1], (0.4, 0.6))
    assert not T.check_grasp(s, sq)


def test_grasp_success_lifts_to_089():
    env = _placed_env(_square(), 0.5, 0.88, 0.5, 1.5)
    env.state.clock.t = 276
    env.state.gripper = T.GripperState(*CFG.grasp_start)
    done = False
    while not done:
        _, r, done, info = env.step([0, 0, 0])
    assert info["lifted"] and info["o_z"] == pytest.approx(0.89) and r.r_g == 5.0


@pytest.mark.parametrize("start_x, expect_x", [(None, 0.62), (0.5, 0.5)])
def test_transit_ends_at_grasp_start(start_x, expect_x):
    env = T.TabletopEnv(T.EnvConfig(grasp_start_x=start_x))
    env.reset(0, _square())
    env.state = _state(0.6, 1.2, 0.62, 1.4)
    env.state.clock.t = 144
    for _ in range(48):
        env.step([1, 1, 1])
    g = env.state.gripper
    assert (g.x, g.y, g.z) == pytest.approx((expect_x, 0.78, 0.78))


# ---------------------------------------------------------------------------
# reset, render, observe


def test_reset_deterministic_and_in_bounds():
    pool = S.training_set()
    env = T.TabletopEnv()
    for i in range(1000):
        shape = pool[i % 80]
        env.reset([3, i], shape)
        o = env.state.obj
        assert 1.0 <= o.y <= 1.3 and 0.3 <= o.x <= 0.7
        w = T.world_polygon(o, shape)
        assert w[:, 0].min() >= CFG.table_x[0] and w[:, 0].max() <= CFG.table_x[1]
        assert w[:, 1].min() >= CFG.table_edge_y and w[:, 1].max() <= CFG.table_far_y
        g = env.state.gripper
        assert g.x == o.x
        assert _penetration(env.state, shape) < 0
    first = T.TabletopEnv()
    first.reset([5, 5], pool[5])
    second = T.TabletopEnv()
    second.reset([5, 5], pool[5])
    assert first.state == second.state


def test_gripper_starts_behind_object():
    env = T.TabletopEnv()
    for seed in range(20):
        env.reset(seed, S.make_shape("notch", 0.2))
        o, g = env.state.obj, env.state.gripper
        w = T.world_polygon(o, env.shape)
        found, _, back = T._geom.slice_at_x(w, o.x)
        *_, dist, _ = T._geom.closest_boundary(w, g.x, g.y)
        assert found and g.x == o.x and g.y > back
        assert dist - CFG.gripper_radius == pytest.approx(0.05, abs=2e-6)
        assert np.linalg.norm(g.quat) == 1.0


def test_oversized_shape_rejected():
    big = S.ObjectShape("square", [(-0.4, -0.4), (0.4, -0.4), (0.4, 0.4), (-0.4, 0.4)], 0.8)
    with pytest.raises(ValueError):
        T.TabletopEnv().reset(0, big)


def test_render_area_ratio_and_determinism():
    shape = S.make_shape("hexagon", 0.26)
    shape.color = (0.9, 0.2, 0.6)
    state = _state(0.5, 1.1, 0.1, 1.5, theta=0.3)
    img = T.render(state, shape, 128, 3)
    frac = np.all(img == np.array(shape.color), axis=-1).mean()
    view = (CFG.view_x[1] - CFG.view_x[0]) * (CFG.view_y[1] - CFG.view_y[0])
    area, _ = S.shoelace(shape.vertices)
    assert abs(frac - area / view) / (area / view) < 0.05
    assert np.array_equal(img, T.render(state, shape, 128, 3))
    assert img.min() >= 0 and img.max() <= 1


def test_render_regions():
    state = _state(5.0, 5.0, 0.5, 1.2)  # object out of view
    img = T.render(state, _square(), 64, 1)
    assert len(np.unique(img)) == 3


def test_oracle_observation_length():
    env = T.TabletopEnv()
    obs = env.reset(0, _square())
    assert obs.shape == (16,) and env.obs_dim == 16
    np.testing.assert_array_equal(obs[-4:], [0, 0, 0, 1])


def test_scripted_controller_sample():
    env = T.TabletopEnv()
    pool = S.training_set()
    for i in range(0, 80, 9):
        env.reset([0, i], pool[i])
        done = False
        while not done:
            _, _, done, info = env.step(T.tie_action(T.scripted_action(env)))
        assert info["success"], pool[i].name


def test_inside_polygon_oracle_agrees_with_contains():
    v = S.make_shape("notch", 0.2).vertices
    rng = np.random.default_rng(0)
    px, py = rng.uniform(-0.2, 0.2, (2, 5000))
    np.testing.assert_array_equal(S.contains(v, px, py), inside_polygon(px, py, v))
