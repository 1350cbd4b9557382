import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rtsac.clock import Priority, VirtualClock
from rtsac.envsim import (
    NEUTRAL_ANGLES,
    EnvConfig,
    RealTimeEnv,
    RewardConfig,
    TargetState,
    advance_target,
    compute_reward,
    episode_steps,
    forward_kinematics,
    render_camera,
    reward_bounds,
    sample_target,
    weight_matrix,
    write_pgm,
    write_ppm,
)
from rtsac.envsim.raster import read_pnm


def in_process(clock, fn):
    out = {}
    clock.spawn("test", lambda: out.setdefault("r", fn()), Priority.INTERACTION)
    clock.run()
    return out.get("r")


def make_env(**overrides):
    clock = VirtualClock()
    env = RealTimeEnv(EnvConfig(**overrides), clock, np.random.default_rng(0))
    return clock, env


# -- kinematics and rendering -------------------------------------------------


def test_forward_kinematics_examples():
    third = math.pi / 3
    assert forward_kinematics([third] * 3 + [0, 0]) == pytest.approx((0.0, 0.0), abs=1e-12)
    assert forward_kinematics([third + 0.1, third, third, 0, 0], gain=1.0) == pytest.approx((0.1, 0.0))
    assert forward_kinematics([math.pi, 0, 0, 0.2, -0.2]) == pytest.approx((0.0, 0.0), abs=1e-12)


def brute_force_mask(pose, center, radius, h, w, fov):
    pitch = fov / w
    mask = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            x = pose[0] + (j - w // 2) * pitch
            y = pose[1] - (i - h // 2) * pitch
            mask[i, j] = (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius**2
    return mask


def test_centered_tiny_target_lights_only_the_center_pixel():
    h, w, fov = 24, 32, 1.5
    pitch = fov / w
    frame = render_camera((0.3, -0.2), np.array([0.3, -0.2]), 0.5 * pitch, h, w, fov)
    assert frame.mask.sum() == 1
    assert frame.mask[h // 2, w // 2]
    assert np.array_equal(frame.pixels[h // 2, w // 2], [1, 0, 0])
    assert np.all(frame.pixels[~frame.mask] == 1.0)


def test_target_out_of_view_gives_empty_mask():
    frame = render_camera((0.0, 0.0), np.array([0.95, 0.95]), 0.1, 24, 32, 1.0)
    assert not frame.mask.any()


@pytest.mark.parametrize("seed", range(20))
def test_mask_matches_per_pixel_disc_test(seed):
    rng = np.random.default_rng(seed)
    pose = tuple(rng.uniform(-0.5, 0.5, 2))
    center = rng.uniform(-1, 1, 2)
    frame = render_camera(pose, center, 0.2, 24, 32, 1.5)
    assert np.array_equal(frame.mask, brute_force_mask(pose, center, 0.2, 24, 32, 1.5))


def test_render_rejects_tiny_images():
    with pytest.raises(ValueError):
        render_camera((0, 0), np.zeros(2), 0.1, 3, 8, 1.0)


# -- reward -------------------------------------------------------------------


def test_weight_matrix_shape_of_falloff():
    for h, w in [(4, 4), (24, 32), (48, 64), (90, 160)]:
        W = weight_matrix(h, w)
        assert W[h // 2, w // 2] == 1.0
        for i, j in [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]:
            assert W[i, j] == 0.0
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        d = np.hypot(ii - h // 2, jj - w // 2).ravel()
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(W.ravel()[order]) <= 0)


def test_reward_vanishes_for_empty_mask_at_neutral_pose():
    cfg = RewardConfig(weights=weight_matrix(24, 32))
    assert compute_reward(np.zeros((24, 32)), cfg.weights, NEUTRAL_ANGLES, cfg) == pytest.approx(0.0, abs=1e-12)


def test_single_center_pixel_reward():
    W = weight_matrix(4, 4)
    M = np.zeros((4, 4))
    M[2, 2] = 1
    cfg = RewardConfig(alpha=800, beta=1, weights=W)
    assert compute_reward(M, W, NEUTRAL_ANGLES, cfg) == pytest.approx(50.0, abs=1e-12)


def brute_force_reward(M, W, omega, alpha, beta):
    h, w = M.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            acc += M[i][j] * W[i][j]
    return alpha * acc / (h * w) - beta * (
        abs(math.pi - (omega[0] + omega[1] + omega[2])) + abs(omega[3] + omega[4])
    )


def test_reward_matches_double_loop_on_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(100):
        h, w = rng.integers(4, 20, size=2)
        M = rng.integers(0, 2, size=(h, w)).astype(bool)
        W = rng.uniform(0, 1, size=(h, w))
        omega = rng.uniform(-2, 3, size=5)
        alpha, beta = rng.uniform(0, 1000), rng.uniform(0, 3)
        cfg = RewardConfig(alpha=alpha, beta=beta, weights=W)
        assert compute_reward(M, W, omega, cfg) == pytest.approx(brute_force_reward(M, W, omega, alpha, beta), abs=1e-9)


def test_reward_shape_mismatch_is_an_error():
    cfg = RewardConfig(weights=weight_matrix(4, 4))
    with pytest.raises(ValueError):
        compute_reward(np.zeros((4, 5)), cfg.weights, NEUTRAL_ANGLES, cfg)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1.5, 1.5), min_size=5, max_size=5),
    st.floats(-1, 1),
    st.floats(-1, 1),
)
def test_reward_bounds_hold_within_angle_boundaries(offsets, tx, ty):
    cfg = EnvConfig()
    rcfg = RewardConfig(weights=weight_matrix(cfg.height, cfg.width))
    omega = NEUTRAL_ANGLES + np.array(offsets)
    pose = forward_kinematics(omega, cfg.fk_gain)
    frame = render_camera(pose, np.array([tx, ty]), cfg.target_radius, cfg.height, cfg.width, cfg.fov_width)
    lo, hi = reward_bounds(rcfg, cfg.angle_margin)
    r = compute_reward(frame.mask, rcfg.weights, omega, rcfg)
    assert lo - 1e-9 <= r <= hi + 1e-9


# -- target motion -------------------------------------------------------------


def tracking(pos, vel):
    return TargetState(np.array(pos, float), np.array(vel, float), 0.1, "tracking")


def test_reaching_target_never_moves():
    t = TargetState(np.array([0.3, 0.4]), np.zeros(2), 0.1, "reaching")
    assert advance_target(t, 10.0) is t


def test_reflection_at_edge():
    out = advance_target(tracking([0.95, 0.0], [1.0, 0.0]), 0.1)
    assert out.position == pytest.approx([0.95, 0.0])
    assert out.velocity == pytest.approx([-1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.5))
def test_tracking_target_stays_in_box_with_constant_speed(seed, dt):
    rng = np.random.default_rng(seed)
    target = sample_target(EnvConfig(task="tracking", target_speed=rng.uniform(0.1, 3.0)), rng)
    speed = np.linalg.norm(target.velocity)
    elapsed = 0.0
    while elapsed < 4.0:
        target = advance_target(target, dt)
        elapsed += dt
        assert np.all(np.abs(target.position) <= 1.0)
        assert np.linalg.norm(target.velocity) == pytest.approx(speed)


def test_reaching_targets_are_uniform_over_window():
    cfg = EnvConfig()
    rng = np.random.default_rng(123)
    pos = np.array([sample_target(cfg, rng).position for _ in range(1000)])
    cells = np.floor((pos + cfg.target_window) / (2 * cfg.target_window) * 4).clip(0, 3).astype(int)
    counts = np.bincount(cells[:, 0] * 4 + cells[:, 1], minlength=16)
    assert stats.chisquare(counts).pvalue > 0.01


# -- arm ------------------------------------------------------------------------


def test_actuation_is_clamped_and_latched():
    clock, env = make_env()
    assert env.actuate(np.array([0.9, 0, 0, 0, 0]))
    assert env.arm.command == pytest.approx([0.7, 0, 0, 0, 0])


def test_non_finite_command_is_rejected_and_previous_kept():
    clock, env = make_env()
    env.actuate(np.array([0.2, 0, 0, 0, 0]))
    assert not env.actuate(np.array([np.nan, 0, 0, 0, 0]))
    assert env.arm.command == pytest.approx([0.2, 0, 0, 0, 0])
    assert env.faults and env.faults[0].kind == "actuate"


def test_integration_over_one_second():
    clock, env = make_env(angle_margin=3.0)
    env.arm.angles = np.zeros(5)
    env.arm.lower = np.full(5, -3.0)
    env.arm.upper = np.full(5, 3.0)
    env.actuate(np.array([0.5, 0, 0, 0, 0]))
    for k in range(125):
        env.arm.tick(k * 8000)
    assert env.arm.angles[0] == pytest.approx(0.5, abs=1e-12)


def test_boundary_pins_joint_and_zeroes_velocity():
    clock, env = make_env()
    env.actuate(np.array([0.7, 0, 0, 0, 0]))
    upper = NEUTRAL_ANGLES[0] + 1.5
    omega = NEUTRAL_ANGLES[0]
    for k in range(500):
        sample = env.arm.tick(k * 8000)
        omega = min(omega + 0.7 * 0.008, upper)  # step-by-step oracle
        assert sample.value.angles[0] == pytest.approx(omega, abs=1e-12)
    assert sample.value.angles[0] == upper
    assert sample.value.velocities[0] == 0.0


# -- device timing and observations ---------------------------------------------


def test_device_counts_over_one_virtual_second():
    clock, env = make_env()

    def body():
        env.start()
        clock.wait_until(999_999)

    in_process(clock, body)
    assert env.arm_slot.writes == 125
    assert env.camera_slot.writes == 25
    times = [s.t for s in env.camera_slot.recent()]
    assert np.all(np.diff(times) == 40_000)


def test_devices_keep_streaming_while_agent_sleeps():
    clock, env = make_env()

    def body():
        env.start()
        clock.wait_until(200_000)
        env.assemble_observation()
        clock.sleep(500_000)  # agent stalls mid-episode
        return env.arm_slot.writes, env.camera_slot.writes

    arm, cam = in_process(clock, body)
    assert (arm, cam) == (700_000 // 8_000 + 1, 700_000 // 40_000 + 1)


def test_observation_uses_three_freshest_frames_with_inclusive_bound():
    clock, env = make_env()

    def body():
        env.start()
        clock.wait_until(130_000)
        a = env.assemble_observation(130_000).frame_times
        b = env.assemble_observation(120_000).frame_times
        return a, b

    a, b = in_process(clock, body)
    assert a == (40_000, 80_000, 120_000)
    assert b == (40_000, 80_000, 120_000)


def test_observation_layout():
    clock, env = make_env()

    def body():
        env.start()
        clock.wait_until(100_000)
        return env.assemble_observation()

    obs = in_process(clock, body)
    assert obs.frames.shape == (9, 24, 32)
    assert obs.proprio.shape == (15,)
    assert list(obs.frame_times) == sorted(obs.frame_times)
    assert all(t <= obs.t for t in obs.frame_times)


def test_reset_homes_arm_in_exactly_three_seconds():
    clock, env = make_env()

    def body():
        env.start()
        env.actuate(np.array([0.7, -0.7, 0.7, -0.7, 0.7]))
        clock.wait_until(2_000_000)
        t0 = clock.now()
        obs = env.reset()
        return t0, clock.now(), obs

    t0, t1, obs = in_process(clock, body)
    assert t1 - t0 == 3_000_000
    assert obs.joint_angles == pytest.approx(NEUTRAL_ANGLES, abs=1e-3)
    assert np.all(obs.previous_action == 0)
    assert len(obs.frame_times) == 3


def test_reset_applies_a_fresh_target():
    clock, env = make_env()
    seen = []

    def body():
        env.start()
        for _ in range(5):
            env.reset()
            seen.append(env.monitor.target.position.copy())

    in_process(clock, body)
    assert len({tuple(p) for p in seen}) == 5


@pytest.mark.parametrize("cycle, steps", [(40, 100), (80, 50), (120, 33), (200, 20)])
def test_episode_step_counts(cycle, steps):
    assert episode_steps(cycle) == steps


def test_frame_dumps_roundtrip(tmp_path):
    frame = render_camera((0, 0), np.zeros(2), 0.3, 24, 32, 1.5)
    write_ppm(tmp_path / "f.ppm", frame.pixels)
    write_pgm(tmp_path / "m.pgm", frame.mask)
    rgb = read_pnm(tmp_path / "f.ppm")
    assert rgb.shape == (24, 32, 3)
    assert np.array_equal(rgb[..., 1] == 0, frame.mask)
    assert np.array_equal(read_pnm(tmp_path / "m.pgm") == 255, frame.mask)
