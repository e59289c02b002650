import numpy as np
import pytest

import worldsim
from worldsim import (BACKGROUND, Box, CUBE_GREEN, EPISODE_LENGTH, EpisodeFinishedError, ManipulationEnv,
                      UnknownTaskError, WorldState, camera_at_angle, dynamic_camera, predefined_configs, render,
                      static_camera, success)


def red_mask(image):
    return (image[..., 0] > image[..., 1] + 0.25) & (image[..., 0] > image[..., 2] + 0.25)


def green_mask(image):
    return (image[..., 1] > image[..., 0] + 0.2) & (image[..., 1] > image[..., 2] + 0.2)


def green_centroid_x(image):
    ys, xs = np.nonzero(green_mask(image))
    return xs.mean()


# ---- reset / step ------------------------------------------------------------

def test_reset_is_deterministic():
    a = ManipulationEnv("push", image_size=32).reset(seed=3)
    b = ManipulationEnv("push", image_size=32).reset(seed=3)
    assert np.array_equal(a.static_view, b.static_view)
    assert np.array_equal(a.dynamic_view, b.dynamic_view)
    assert a.phi_d == b.phi_d


def test_reset_starts_a_fresh_episode():
    env = ManipulationEnv("reach", image_size=16)
    env.reset(seed=0)
    assert env.state.step_count == 0
    assert not env.done


def test_unknown_task():
    with pytest.raises(UnknownTaskError):
        ManipulationEnv("stack")
    env = ManipulationEnv("reach", image_size=8)
    with pytest.raises(UnknownTaskError):
        env.reset(task="stack")


def test_reach_renders_goal_but_no_cube():
    obs = ManipulationEnv("reach", image_size=84).reset(seed=0, config_index=0)
    assert red_mask(obs.static_view).sum() > 0
    assert green_mask(obs.static_view).sum() == 0


def test_push_renders_cube():
    obs = ManipulationEnv("push", image_size=84).reset(seed=0, config_index=0)
    assert green_mask(obs.static_view).sum() > 0


def test_zero_action_keeps_position():
    env = ManipulationEnv("reach", image_size=8)
    env.reset(seed=1)
    before = env.state.ee_pos.copy()
    env.step(np.zeros(3))
    assert np.array_equal(env.state.ee_pos, before)
    assert env.state.step_count == 1


def test_reach_goal_gives_success_bonus():
    env = ManipulationEnv("reach", image_size=8)
    env.reset(seed=0)
    env.state.ee_pos = env.state.goal_pos.copy()
    _, reward, done, info = env.step(np.zeros(3))
    assert info["success"] and info["terminal"] and done
    assert reward == pytest.approx(10.0)


def test_episode_times_out_after_fifty_steps():
    env = ManipulationEnv("reach", image_size=8)
    env.reset(seed=0, config_index=0)
    for k in range(EPISODE_LENGTH):
        _, reward, done, info = env.step(np.zeros(3))
        assert -1.0 <= reward <= 10.0
        assert done == (k == EPISODE_LENGTH - 1)
    assert not info["success"]
    assert info["timeout"] and not info["terminal"]
    with pytest.raises(EpisodeFinishedError):
        env.step(np.zeros(3))


def test_actions_keep_gripper_in_workspace():
    env = ManipulationEnv("lift", image_size=8)
    env.reset(seed=2)
    rng = np.random.default_rng(0)
    done = False
    while not done:
        _, reward, done, _ = env.step(rng.choice([-1.0, 1.0], size=4))
        assert np.all(env.state.ee_pos >= worldsim.WORKSPACE_LOW)
        assert np.all(env.state.ee_pos <= worldsim.WORKSPACE_HIGH)
        assert -1.0 <= reward <= 10.0


def test_action_dims_must_match_task():
    env = ManipulationEnv("push", image_size=8)
    env.reset(seed=0)
    with pytest.raises(ValueError):
        env.step(np.zeros(3))
    assert env.action_dim == 2


def test_push_contact_moves_cube():
    env = ManipulationEnv("push", image_size=8)
    env.reset(seed=0, config_index=0)
    state = env.state
    state.object_pos = np.array([0.0, 0.0, worldsim.CUBE_HALF])
    state.goal_pos = np.array([0.25, 0.0, worldsim.CUBE_HALF])
    state.ee_pos = np.array([-0.03, 0.0, worldsim.WORKSPACE_LOW[2]])
    env.step(np.array([1.0, 0.0]))
    assert state.object_pos[0] == pytest.approx(worldsim.STEP_SIZE)


def test_lift_grasp_and_raise():
    env = ManipulationEnv("lift", image_size=8)
    env.reset(seed=0, config_index=0)
    env.state.ee_pos = env.state.object_pos.copy()
    info = {}
    for _ in range(3):
        _, _, _, info = env.step(np.array([0.0, 0.0, 0.0, -1.0]))
    assert info["grasped"]
    done = False
    while not done:
        _, _, done, info = env.step(np.array([0.0, 0.0, 1.0, -1.0]))
    assert info["success"]
    assert env.state.object_pos[2] > worldsim.LIFT_HEIGHT


# ---- success predicate -----------------------------------------------------------

def test_success_reach_exact_and_boundary():
    at_goal = WorldState("reach", [0.1, 0.1, 0.1], goal_pos=[0.1, 0.1, 0.1])
    assert success(at_goal)
    boundary = WorldState("reach", [0.05, 0.0, 0.0], goal_pos=[0.0, 0.0, 0.0])
    assert not success(boundary)


def test_lift_needs_the_cube_in_the_air():
    state = WorldState("lift", [0.0, 0.0, 0.2], object_pos=[0.1, 0.1, 0.02], goal_pos=[0.1, 0.1, 0.02])
    assert not success(state, "lift")


# ---- cameras -----------------------------------------------------------------

def test_dynamic_camera_zero_range_is_static():
    assert dynamic_camera(np.random.default_rng(0), 0.0) == static_camera()


def test_dynamic_camera_angles_uniform():
    rng = np.random.default_rng(0)
    offsets = np.array([dynamic_camera(rng, 30.0).azimuth - static_camera().azimuth for _ in range(10000)])
    assert offsets.min() >= 0.0 and offsets.max() <= 30.0
    assert abs(offsets.mean() - 15.0) < 3 * (30.0 / np.sqrt(12)) / np.sqrt(len(offsets))


def test_dynamic_camera_rejects_negative_range():
    with pytest.raises(ValueError):
        dynamic_camera(np.random.default_rng(0), -1.0)


def test_emitted_angles_stay_in_range():
    env = ManipulationEnv("reach", phi=20.0, image_size=8)
    obs = env.reset(seed=4)
    angles = [obs.phi_d]
    for _ in range(10):
        obs, _, _, info = env.step(np.zeros(3))
        angles.append(info["phi_d"])
    assert all(0.0 <= a <= 20.0 for a in angles)


def test_observe_uses_exact_angle():
    env = ManipulationEnv("push", image_size=16)
    env.reset(seed=0)
    obs = env.observe(45.0)
    assert obs.phi_d == 45.0
    expected = render(env.state, camera_at_angle(45.0), 16)
    assert np.array_equal(obs.dynamic_view, expected)


# ---- rendering -----------------------------------------------------------------

def test_empty_scene_is_background():
    image = render([], static_camera(), 16)
    assert np.allclose(image, BACKGROUND)


def test_render_is_deterministic():
    state = WorldState("push", [0.1, 0.0, 0.05], object_pos=[0.0, 0.1, 0.02], goal_pos=[-0.1, 0.0, 0.02])
    assert np.array_equal(render(state, static_camera(), 32), render(state, static_camera(), 32))


def test_cube_moves_with_world_position():
    right = static_camera().basis()[0]
    xs = []
    for offset in (-0.1, 0.0, 0.1):
        center = np.array([0.0, 0.0, 0.03]) + offset * right
        xs.append(green_centroid_x(render([Box(center, [0.03] * 3, CUBE_GREEN)], static_camera(), 64)))
    assert xs[0] < xs[1] < xs[2]


# ---- state snapshots ---------------------------------------------------------

def test_get_set_state_replays_identically():
    env = ManipulationEnv("push", image_size=16)
    env.reset(seed=5)
    env.step(np.array([0.5, -0.5]))
    snapshot = env.get_state()
    first = env.step(np.array([1.0, 0.0]))[0]
    env.set_state(snapshot)
    second = env.step(np.array([1.0, 0.0]))[0]
    assert np.array_equal(first.dynamic_view, second.dynamic_view)
    assert first.phi_d == second.phi_d


def test_predefined_configs_fixed_per_task():
    for task in worldsim.TASKS:
        a, b = predefined_configs(task), predefined_configs(task)
        assert len(a) == 10
        assert all(np.array_equal(x["goal_pos"], y["goal_pos"]) for x, y in zip(a, b))
