"""Simulated real-time reaching/tracking environment.

Three device loops (arm at 8ms, monitor, camera at 40ms) stream timestamped
samples into latest-wins slots on the shared clock.  The environment
interface actuates the arm, fuses the freshest samples into observations,
computes rewards and performs resets.  Time passes whether or not anyone
reads the slots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from rtsac.clock import Clock, Priority, ms_to_us
from rtsac.envsim.geometry import (
    MAX_JOINT_SPEED,
    N_JOINTS,
    NEUTRAL_ANGLES,
    CameraFrame,
    RewardConfig,
    compute_reward,
    forward_kinematics,
    render_camera,
    weight_matrix,
)
from rtsac.sync import LatestSlot, Timestamped

log = logging.getLogger(__name__)

Regime = Literal["reaching", "tracking"]
FRAME_STACK = 3


@dataclass
class EnvConfig:
    height: int = 24
    width: int = 32
    task: Regime = "reaching"
    fk_gain: float = 0.5
    fov_width: float = 1.5  # plane units spanned by the image width
    target_radius: float = 0.15
    target_speed: float = 0.25  # plane units / s (tracking)
    target_window: float = 0.8  # reaching targets are uniform in [-win, win]^2
    angle_margin: float = 1.5  # joints confined to neutral +/- margin
    arm_period_ms: float = 8.0
    camera_period_ms: float = 40.0
    monitor_period_ms: float = 20.0
    episode_ms: float = 4000.0
    reset_ms: float = 3000.0
    reward_alpha: float = 800.0
    reward_beta: float = 1.0
    frame_history: int = 8

    def __post_init__(self) -> None:
        if self.task not in ("reaching", "tracking"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.height < 4 or self.width < 4:
            raise ValueError("image must be at least 4x4")


@dataclass(frozen=True)
class ArmState:
    angles: np.ndarray
    velocities: np.ndarray
    command: np.ndarray


@dataclass(frozen=True)
class TargetState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    regime: Regime


@dataclass(frozen=True)
class Observation:
    frames: np.ndarray  # (3 * 3, h, w) float32, oldest frame first
    frame_times: tuple[int, ...]
    joint_angles: np.ndarray
    joint_velocities: np.ndarray
    previous_action: np.ndarray
    t: int
    mask: np.ndarray  # target mask of the newest frame, for the reward

    @property
    def proprio(self) -> np.ndarray:
        return np.concatenate([self.joint_angles, self.joint_velocities, self.previous_action]).astype(np.float32)


PROPRIO_DIM = 3 * N_JOINTS


def advance_target(target: TargetState, dt: float) -> TargetState:
    """Move a tracking target for ``dt`` seconds with specular reflection at the unit box."""
    if target.regime == "reaching":
        return target
    if not dt > 0:
        raise ValueError("dt must be positive")
    pos = target.position + target.velocity * dt
    vel = target.velocity.copy()
    for k in range(2):
        while pos[k] > 1.0 or pos[k] < -1.0:
            if pos[k] > 1.0:
                pos[k] = 2.0 - pos[k]
            else:
                pos[k] = -2.0 - pos[k]
            vel[k] = -vel[k]
    return TargetState(position=pos, velocity=vel, radius=target.radius, regime=target.regime)


def sample_target(cfg: EnvConfig, rng: np.random.Generator) -> TargetState:
    pos = rng.uniform(-cfg.target_window, cfg.target_window, size=2)
    if cfg.task == "tracking":
        heading = rng.uniform(0.0, 2.0 * math.pi)
        vel = cfg.target_speed * np.array([math.cos(heading), math.sin(heading)])
    else:
        vel = np.zeros(2)
    return TargetState(position=pos, velocity=vel, radius=cfg.target_radius, regime=cfg.task)


def episode_steps(action_cycle_ms: float, episode_ms: float = 4000.0) -> int:
    return int(math.floor(episode_ms / action_cycle_ms + 1e-9))


class ArmDevice:
    """Integrates latched joint-velocity commands on a fixed tick."""

    def __init__(self, cfg: EnvConfig, slot: LatestSlot[Timestamped[ArmState]]) -> None:
        self.dt = cfg.arm_period_ms / 1000.0
        self.lower = NEUTRAL_ANGLES - cfg.angle_margin
        self.upper = NEUTRAL_ANGLES + cfg.angle_margin
        self.slot = slot
        self.angles = NEUTRAL_ANGLES.copy()
        self.velocities = np.zeros(N_JOINTS)
        self.command = np.zeros(N_JOINTS)
        self.homing = False

    def latch(self, command: np.ndarray) -> None:
        self.command = np.array(command, dtype=np.float64)

    def tick(self, t: int) -> Timestamped[ArmState]:
        if self.homing:
            v = np.clip((NEUTRAL_ANGLES - self.angles) / self.dt, -MAX_JOINT_SPEED, MAX_JOINT_SPEED)
        else:
            v = self.command
        angles = self.angles + v * self.dt
        pinned = (angles <= self.lower) | (angles >= self.upper)
        self.angles = np.clip(angles, self.lower, self.upper)
        self.velocities = np.where(pinned, 0.0, v)
        sample = Timestamped(t, ArmState(self.angles.copy(), self.velocities.copy(), np.array(self.command)))
        self.slot.write(sample)
        return sample


class MonitorDevice:
    """Displays the target; applies pending resets and moves tracking targets."""

    def __init__(self, target: TargetState, slot: LatestSlot[Timestamped[TargetState]]) -> None:
        self.target = target
        self.slot = slot
        self.pending: TargetState | None = None
        self._last_t: int | None = None

    def tick(self, t: int) -> Timestamped[TargetState]:
        if self.pending is not None:
            self.target, self.pending = self.pending, None
        elif self._last_t is not None and t > self._last_t:
            self.target = advance_target(self.target, (t - self._last_t) / 1e6)
        self._last_t = t
        sample = Timestamped(t, self.target)
        self.slot.write(sample)
        return sample


class CameraDevice:
    def __init__(
        self,
        cfg: EnvConfig,
        arm_slot: LatestSlot[Timestamped[ArmState]],
        monitor_slot: LatestSlot[Timestamped[TargetState]],
        slot: LatestSlot[Timestamped[CameraFrame]],
    ) -> None:
        self.cfg = cfg
        self.arm_slot = arm_slot
        self.monitor_slot = monitor_slot
        self.slot = slot

    def tick(self, t: int) -> Timestamped[CameraFrame]:
        arm = self.arm_slot.read()
        target = self.monitor_slot.read()
        pose = forward_kinematics(arm.value.angles, self.cfg.fk_gain)
        frame = render_camera(
            pose,
            target.value.position,
            target.value.radius,
            self.cfg.height,
            self.cfg.width,
            self.cfg.fov_width,
            t,
        )
        sample = Timestamped(t, frame)
        self.slot.write(sample)
        return sample


@dataclass
class Fault:
    t: int
    kind: str
    detail: str = ""


class RealTimeEnv:
    """Environment interface over the three device loops.

    ``start()`` registers the device loops on the clock; all other methods are
    called from the interaction process.
    """

    def __init__(self, cfg: EnvConfig, clock: Clock, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.clock = clock
        self.rng = rng
        self.reward_cfg = RewardConfig(
            alpha=cfg.reward_alpha, beta=cfg.reward_beta, weights=weight_matrix(cfg.height, cfg.width)
        )
        self.arm_slot: LatestSlot[Timestamped[ArmState]] = LatestSlot()
        self.monitor_slot: LatestSlot[Timestamped[TargetState]] = LatestSlot()
        self.camera_slot: LatestSlot[Timestamped[CameraFrame]] = LatestSlot(history=cfg.frame_history)
        self.arm = ArmDevice(cfg, self.arm_slot)
        self.monitor = MonitorDevice(sample_target(cfg, rng), self.monitor_slot)
        self.camera = CameraDevice(cfg, self.arm_slot, self.monitor_slot, self.camera_slot)
        self.previous_action = np.zeros(N_JOINTS)
        self.faults: list[Fault] = []
        self.episode_start: int | None = None
        self._started = False

    def start(self) -> None:
        if self._started:
            return
        t0 = self.clock.now()
        self.clock.every("arm", ms_to_us(self.cfg.arm_period_ms), lambda: self.arm.tick(self.clock.now()), Priority.ARM, t0)
        self.clock.every(
            "monitor", ms_to_us(self.cfg.monitor_period_ms), lambda: self.monitor.tick(self.clock.now()), Priority.MONITOR, t0
        )
        self.clock.every(
            "camera", ms_to_us(self.cfg.camera_period_ms), lambda: self.camera.tick(self.clock.now()), Priority.CAMERA, t0
        )
        self._started = True

    # -- interface operations ----------------------------------------------

    def actuate(self, command: np.ndarray) -> bool:
        command = np.asarray(command, dtype=np.float64)
        if command.shape != (N_JOINTS,) or not np.all(np.isfinite(command)):
            self.faults.append(Fault(self.clock.now(), "actuate", f"rejected command {command!r}"))
            log.warning("rejected non-finite actuation command %r", command)
            return False
        command = np.clip(command, -MAX_JOINT_SPEED, MAX_JOINT_SPEED)
        self.arm.latch(command)
        self.previous_action = command
        return True

    def assemble_observation(self, now: int | None = None) -> Observation:
        now = self.clock.now() if now is None else now
        frames = [s for s in self.camera_slot.recent() if s.t <= now][-FRAME_STACK:]
        if len(frames) < FRAME_STACK:
            raise RuntimeError(f"only {len(frames)} camera frames available at t={now}us")
        arm = self.arm_slot.read().value
        stacked = np.concatenate([f.value.pixels.transpose(2, 0, 1) for f in frames], axis=0)
        return Observation(
            frames=stacked,
            frame_times=tuple(f.t for f in frames),
            joint_angles=arm.angles,
            joint_velocities=arm.velocities,
            previous_action=np.array(self.previous_action),
            t=now,
            mask=frames[-1].value.mask,
        )

    def reward(self, obs: Observation) -> float:
        return compute_reward(obs.mask, self.reward_cfg.weights, obs.joint_angles, self.reward_cfg)

    def reset(self) -> Observation:
        """Home the arm and re-draw the target while ``reset_ms`` of time passes."""
        self.start()
        self.arm.latch(np.zeros(N_JOINTS))
        self.arm.homing = True
        self.monitor.pending = sample_target(self.cfg, self.rng)
        self.clock.sleep(ms_to_us(self.cfg.reset_ms))
        self.arm.homing = False
        self.arm.latch(np.zeros(N_JOINTS))
        self.previous_action = np.zeros(N_JOINTS)
        self.episode_start = self.clock.now()
        return self.assemble_observation()
