"""Camera geometry, rendering and the pixel-mask reward."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_JOINTS = 5
MAX_JOINT_SPEED = 0.7  # rad/s
NEUTRAL_ANGLES = np.array([math.pi / 3, math.pi / 3, math.pi / 3, 0.0, 0.0])

RED = np.array([1.0, 0.0, 0.0], dtype=np.float32)


def forward_kinematics(angles: np.ndarray, gain: float = 1.0) -> tuple[float, float]:
    """Camera pose (pan, tilt) on the monitor plane.

    Only the sums of the shoulder/elbow group and of the wrist group matter,
    so the five joints are redundant for two pose coordinates.
    """
    a = np.asarray(angles, dtype=np.float64)
    return gain * (a[0] + a[1] + a[2] - math.pi), gain * (a[3] + a[4])


def pixel_centers(pose: tuple[float, float], h: int, w: int, fov_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Plane coordinates of pixel centers: (x per column, y per row).

    Pixel (h//2, w//2) sits exactly on the pose; rows grow downwards.
    """
    pitch = fov_width / w
    xs = pose[0] + (np.arange(w) - w // 2) * pitch
    ys = pose[1] - (np.arange(h) - h // 2) * pitch
    return xs, ys


def disc_mask(
    pose: tuple[float, float],
    center: np.ndarray,
    radius: float,
    h: int,
    w: int,
    fov_width: float,
) -> np.ndarray:
    xs, ys = pixel_centers(pose, h, w, fov_width)
    dx = xs[None, :] - center[0]
    dy = ys[:, None] - center[1]
    return dx * dx + dy * dy <= radius * radius


@dataclass(frozen=True)
class CameraFrame:
    pixels: np.ndarray  # (h, w, 3) float32 in [0, 1]
    mask: np.ndarray  # (h, w) bool
    t: int


def render_camera(
    pose: tuple[float, float],
    target_position: np.ndarray,
    target_radius: float,
    h: int,
    w: int,
    fov_width: float,
    t: int = 0,
) -> CameraFrame:
    """Red disc on a white background, seen through an orthographic window."""
    if h < 4 or w < 4:
        raise ValueError(f"image must be at least 4x4, got {h}x{w}")
    mask = disc_mask(pose, target_position, target_radius, h, w, fov_width)
    pixels = np.ones((h, w, 3), dtype=np.float32)
    pixels[mask] = RED
    return CameraFrame(pixels=pixels, mask=mask, t=t)


def weight_matrix(h: int, w: int) -> np.ndarray:
    """Radial linear falloff: 1 at the center pixel, 0 at (and beyond) the nearest corner."""
    ci, cj = h // 2, w // 2
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d = np.hypot(ii - ci, jj - cj)
    d_corner = min(math.hypot(ci - i, cj - j) for i in (0, h - 1) for j in (0, w - 1))
    return np.clip(1.0 - d / d_corner, 0.0, 1.0)


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 800.0
    beta: float = 1.0
    weights: np.ndarray = field(default_factory=lambda: weight_matrix(24, 32))


def twist_penalty(angles: np.ndarray) -> float:
    a = np.asarray(angles, dtype=np.float64)
    return abs(math.pi - (a[0] + a[1] + a[2])) + abs(a[3] + a[4])


def compute_reward(mask: np.ndarray, weights: np.ndarray, angles: np.ndarray, cfg: RewardConfig) -> float:
    """alpha * mean(M * W) - beta * (|pi - sum(w1..w3)| + |w4 + w5|)."""
    mask = np.asarray(mask)
    weights = np.asarray(weights)
    if mask.shape != weights.shape or mask.ndim != 2:
        raise ValueError(f"mask {mask.shape} and weights {weights.shape} must be equal 2-D shapes")
    h, w = mask.shape
    target_term = float(np.sum(mask * weights, dtype=np.float64)) / (h * w)
    return cfg.alpha * target_term - cfg.beta * twist_penalty(angles)


def reward_bounds(cfg: RewardConfig, angle_margin: float) -> tuple[float, float]:
    """Closed interval that contains every reward reachable within the angle boundaries."""
    worst_twist = 3 * angle_margin + 2 * angle_margin
    return -cfg.beta * worst_twist, cfg.alpha * float(np.max(cfg.weights))
