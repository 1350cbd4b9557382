"""Uniform replay buffer and batch preparation (sampling + random crop).

Images are stored at capture resolution as uint8.  Consecutive transitions
of an episode share storage: the next observation of transition k is the
observation of transition k+1, so only episode-final successors are stored
separately.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass

import numpy as np

from rtsac.envsim import MAX_JOINT_SPEED, Observation

log = logging.getLogger(__name__)


class NotReady(Exception):
    """The buffer holds fewer transitions than the requested batch."""


@dataclass(frozen=True)
class Transition:
    observation: Observation
    action: np.ndarray
    reward: float  # already scaled by the action cycle
    next_observation: Observation
    done: bool = False


@dataclass
class Batch:
    frames: np.ndarray  # (B, C, out_h, out_w) uint8, cropped
    proprio: np.ndarray  # (B, P) float32
    action: np.ndarray  # (B, A) float32
    reward: np.ndarray  # (B,) float32
    next_frames: np.ndarray
    next_proprio: np.ndarray
    done: np.ndarray  # (B,) float32
    ids: np.ndarray  # push sequence number of every sampled transition
    sampled_at_version: int = 0
    sampled_at: int = 0  # clock time when sampling started, microseconds

    def __len__(self) -> int:
        return len(self.reward)


def crop_dims(h: int, w: int, ratio: float = 0.9) -> tuple[int, int]:
    return int(math.floor(h * ratio + 1e-9)), int(math.floor(w * ratio + 1e-9))


def to_u8(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(frames) * 255.0).astype(np.uint8)


def sample_crop_offsets(
    n: int, h: int, w: int, out_h: int, out_w: int, rng: np.random.Generator
) -> np.ndarray:
    if out_h > h or out_w > w:
        raise ValueError(f"crop {out_h}x{out_w} larger than image {h}x{w}")
    di = rng.integers(0, h - out_h + 1, size=n)
    dj = rng.integers(0, w - out_w + 1, size=n)
    return np.stack([di, dj], axis=1)


def crop_at(images: np.ndarray, offsets: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Crop every element at its own offset; all channels of an element share it."""
    n, _, h, w = images.shape
    if out_h > h or out_w > w:
        raise ValueError(f"crop {out_h}x{out_w} larger than image {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(images, (out_h, out_w), axis=(2, 3))
    return np.ascontiguousarray(windows[np.arange(n), :, offsets[:, 0], offsets[:, 1]])


def random_crop(images: np.ndarray, out_h: int, out_w: int, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = images.shape
    return crop_at(images, sample_crop_offsets(n, h, w, out_h, out_w, rng), out_h, out_w)


def center_crop(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    n, _, h, w = images.shape
    offsets = np.tile([(h - out_h) // 2, (w - out_w) // 2], (n, 1))
    return crop_at(images, offsets, out_h, out_w)


class ReplayBuffer:
    """Ring buffer for one writer (interaction) and one reader (sampler)."""

    def __init__(
        self,
        capacity: int,
        frame_shape: tuple[int, int, int],
        proprio_dim: int = 15,
        action_dim: int = 5,
    ) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.frame_shape = tuple(frame_shape)
        self._frames = np.zeros((capacity, *frame_shape), dtype=np.uint8)
        self._proprio = np.zeros((capacity, proprio_dim), dtype=np.float32)
        self._action = np.zeros((capacity, action_dim), dtype=np.float32)
        self._reward = np.zeros(capacity, dtype=np.float32)
        self._done = np.zeros(capacity, dtype=np.float32)
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._chained = np.zeros(capacity, dtype=bool)  # successor stored in the next slot
        self._detached: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._pending: tuple[int, Observation, np.ndarray, np.ndarray] | None = None
        self._lock = threading.Lock()
        self._cursor = 0
        self._size = 0
        self.pushed = 0
        self.faults = 0

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition) -> bool:
        action = np.asarray(t.action, dtype=np.float64)
        numeric = [action, np.atleast_1d(t.reward), t.observation.proprio, t.next_observation.proprio]
        if not all(np.all(np.isfinite(x)) for x in numeric) or np.any(np.abs(action) > MAX_JOINT_SPEED + 1e-9):
            self.faults += 1
            log.warning("rejected transition with non-finite or out-of-range fields")
            return False
        frames = to_u8(t.observation.frames)
        proprio = t.observation.proprio
        with self._lock:
            i = self._cursor
            self._detached.pop(i, None)
            if self._pending is not None:
                prev, prev_next, nf, np_ = self._pending
                if prev_next is t.observation or (
                    np.array_equal(nf, frames) and np.array_equal(np_, proprio)
                ):
                    self._chained[prev] = True
                elif prev != i:
                    self._detached[prev] = (nf, np_)
            self._frames[i] = frames
            self._proprio[i] = proprio
            self._action[i] = action
            self._reward[i] = t.reward
            self._done[i] = float(t.done)
            self._ids[i] = self.pushed
            self._chained[i] = False
            self._pending = (i, t.next_observation, to_u8(t.next_observation.frames), t.next_observation.proprio)
            self._cursor = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self.pushed += 1
        return True

    def recent_frames(self, n: int) -> np.ndarray:
        """Copies of the newest ``n`` stored frame stacks (uint8), oldest first."""
        with self._lock:
            n = min(n, self._size)
            idx = [(self._cursor - n + k) % self.capacity for k in range(n)]
            return self._frames[idx].copy()

    def sample_raw(
        self, batch_size: int, rng: np.random.Generator, min_size: int | None = None
    ) -> dict[str, np.ndarray]:
        """Uniform draw with replacement; uncropped arrays.

        Raises NotReady while fewer than ``min_size`` (default: the batch size)
        transitions are stored.
        """
        need = batch_size if min_size is None else max(1, min_size)
        with self._lock:
            if self._size < need:
                raise NotReady(f"{self._size} transitions buffered, {batch_size} requested")
            oldest = (self._cursor - self._size) % self.capacity
            slots = (oldest + rng.integers(0, self._size, size=batch_size)) % self.capacity
            nxt = (slots + 1) % self.capacity
            next_frames = self._frames[nxt]
            next_proprio = self._proprio[nxt]
            for k in np.flatnonzero(~self._chained[slots]):
                s = int(slots[k])
                if s in self._detached:
                    next_frames[k], next_proprio[k] = self._detached[s]
                else:
                    _, _, next_frames[k], next_proprio[k] = self._pending
            return {
                "frames": self._frames[slots],
                "proprio": self._proprio[slots],
                "action": self._action[slots],
                "reward": self._reward[slots],
                "done": self._done[slots],
                "ids": self._ids[slots],
                "next_frames": next_frames,
                "next_proprio": next_proprio,
            }

    def sample(
        self,
        batch_size: int,
        rng: np.random.Generator,
        crop: tuple[int, int] | None = None,
        version: int = 0,
        t: int = 0,
        min_size: int | None = None,
    ) -> Batch:
        raw = self.sample_raw(batch_size, rng, min_size)
        frames, next_frames = raw["frames"], raw["next_frames"]
        if crop is not None:
            frames = random_crop(frames, crop[0], crop[1], rng)
            next_frames = random_crop(next_frames, crop[0], crop[1], rng)
        return Batch(
            frames=frames,
            proprio=raw["proprio"],
            action=raw["action"],
            reward=raw["reward"],
            next_frames=next_frames,
            next_proprio=raw["next_proprio"],
            done=raw["done"],
            ids=raw["ids"],
            sampled_at_version=version,
            sampled_at=t,
        )
