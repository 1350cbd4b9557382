from rtsac.envsim.env import (
    FRAME_STACK,
    PROPRIO_DIM,
    ArmDevice,
    ArmState,
    EnvConfig,
    Fault,
    Observation,
    RealTimeEnv,
    TargetState,
    advance_target,
    episode_steps,
    sample_target,
)
from rtsac.envsim.geometry import (
    MAX_JOINT_SPEED,
    N_JOINTS,
    NEUTRAL_ANGLES,
    CameraFrame,
    RewardConfig,
    compute_reward,
    forward_kinematics,
    render_camera,
    reward_bounds,
    weight_matrix,
)
from rtsac.envsim.raster import write_pgm, write_ppm

__all__ = [
    "FRAME_STACK",
    "MAX_JOINT_SPEED",
    "N_JOINTS",
    "NEUTRAL_ANGLES",
    "PROPRIO_DIM",
    "ArmDevice",
    "ArmState",
    "CameraFrame",
    "EnvConfig",
    "Fault",
    "Observation",
    "RealTimeEnv",
    "RewardConfig",
    "TargetState",
    "advance_target",
    "compute_reward",
    "episode_steps",
    "forward_kinematics",
    "render_camera",
    "reward_bounds",
    "sample_target",
    "weight_matrix",
    "write_pgm",
    "write_ppm",
]
