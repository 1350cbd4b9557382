"""Networks for pixel-based SAC: conv encoder with spatial softmax, actor, twin critics.

Autograd, convolution and Adam come from torch; the pieces specific to this
agent (spatial-softmax keypoints, the tanh-squashed Gaussian scaled to the
joint-speed limit, Polyak averaging, immutable parameter snapshots and the
flat checkpoint format) live here.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
ACTION_SCALE = 0.7
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# spatial softmax


def coordinate_grid(n: int, dtype=torch.float64) -> torch.Tensor:
    """n evenly spaced points on [-1, 1], exactly antisymmetric about the middle."""
    if n == 1:
        return torch.zeros(1, dtype=dtype)
    k = torch.arange(n, dtype=dtype)
    return (2.0 * k - (n - 1)) / (n - 1)


def _expected_coordinate(probs: torch.Tensor) -> torch.Tensor:
    """Expected grid coordinate along the last axis, summed over everything but (B, C)."""
    # Pairs mirrored positions: sum_j p_j x_j == sum_{j < n/2} (p_{n-1-j} - p_j) x_{n-1-j}.
    # Differencing before any reduction makes a mirror-symmetric map give exactly 0.
    n = probs.shape[-1]
    half = n // 2
    coords = coordinate_grid(n, probs.dtype).to(probs.device)
    diff = probs[..., n - half :].flip(-1) - probs[..., :half]
    return (diff * coords[n - half :].flip(0)).flatten(2).sum(dim=-1)


def spatial_softmax(features: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) activations -> (B, 2C) expected (x, y) per channel.

    x runs along width and y along height, both in [-1, 1]; the output is
    interleaved as (x_0, y_0, x_1, y_1, ...).
    """
    b, c, h, w = features.shape
    probs = torch.softmax(features.reshape(b, c, h * w), dim=-1).reshape(b, c, h, w)
    x = _expected_coordinate(probs)
    y = _expected_coordinate(probs.transpose(2, 3))
    return torch.stack([x, y], dim=-1).reshape(b, 2 * c)


class SpatialSoftmax(nn.Module):
    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return spatial_softmax(features)


# ---------------------------------------------------------------------------
# modules


class Encoder(nn.Module):
    """Stacked frames -> conv feature maps -> soft keypoint coordinates."""

    def __init__(
        self,
        in_channels: int = 9,
        filters: tuple[int, ...] = (8, 16),
        strides: tuple[int, ...] | None = None,
    ) -> None:
        super().__init__()
        if strides is None:
            strides = (2,) + (1,) * (len(filters) - 1)  # downsample once, keep resolution for the keypoints
        if len(strides) != len(filters):
            raise ValueError("need one stride per conv layer")
        layers: list[nn.Module] = []
        prev = in_channels
        for f, s in zip(filters, strides):
            layers += [nn.Conv2d(prev, f, kernel_size=3, stride=s), nn.ReLU()]
            prev = f
        self.in_channels = in_channels
        self.convs = nn.Sequential(*layers)
        self.keypoints = SpatialSoftmax()
        self.feature_dim = 2 * prev

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 4 or frames.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) frames, got {tuple(frames.shape)}")
        return self.keypoints(self.convs(frames))


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.ReLU(),
        nn.Linear(hidden, hidden),
        nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


class Actor(nn.Module):
    """Gaussian policy head over encoder features and proprioception."""

    def __init__(self, feature_dim: int, proprio_dim: int, action_dim: int, hidden: int = 128) -> None:
        super().__init__()
        self.action_dim = action_dim
        self.trunk = mlp(feature_dim + proprio_dim, hidden, 2 * action_dim)

    def forward(self, features: torch.Tensor, proprio: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, log_std = self.trunk(torch.cat([features, proprio], dim=-1)).chunk(2, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)


class Critic(nn.Module):
    """Shared encoder with one or two Q heads."""

    def __init__(
        self,
        proprio_dim: int,
        action_dim: int,
        hidden: int = 128,
        filters: tuple[int, ...] = (8, 16),
        in_channels: int = 9,
        twin: bool = True,
        strides: tuple[int, ...] | None = None,
    ) -> None:
        super().__init__()
        self.encoder = Encoder(in_channels, filters, strides)
        in_dim = self.encoder.feature_dim + proprio_dim + action_dim
        self.heads = nn.ModuleList([mlp(in_dim, hidden, 1) for _ in range(2 if twin else 1)])

    def forward(
        self,
        frames: torch.Tensor,
        proprio: torch.Tensor,
        action: torch.Tensor,
        features: torch.Tensor | None = None,
    ) -> list[torch.Tensor]:
        if features is None:
            features = self.encoder(frames)
        x = torch.cat([features, proprio, action], dim=-1)
        return [head(x).squeeze(-1) for head in self.heads]


# ---------------------------------------------------------------------------
# squashed Gaussian


def squash_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log density of a = 0.7 * tanh(u) where u ~ N(mean, exp(log_std)^2), summed over dims."""
    z = (u - mean) * torch.exp(-log_std)
    gauss = -0.5 * z * z - log_std - 0.5 * _LOG_2PI
    # log(1 - tanh(u)^2) written to stay finite for large |u|
    log_dtanh = 2.0 * (math.log(2.0) - u - nn.functional.softplus(-2.0 * u))
    return (gauss - log_dtanh - math.log(ACTION_SCALE)).sum(dim=-1)


def sample_squashed(
    mean: torch.Tensor,
    log_std: torch.Tensor,
    noise: torch.Tensor | None = None,
    *,
    stochastic: bool = True,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized action and its log-probability.

    ``noise`` fixes epsilon (common random numbers); otherwise it is drawn
    from ``generator``.  Deterministic mode uses epsilon = 0.
    """
    if noise is None:
        if stochastic:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
        else:
            noise = torch.zeros_like(mean)
    u = mean + torch.exp(log_std) * noise
    return ACTION_SCALE * torch.tanh(u), squash_log_prob(u, mean, log_std)


# ---------------------------------------------------------------------------
# optimisation helpers


def make_adam(params: Iterable[torch.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


@torch.no_grad()
def polyak_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, parameter by parameter."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for tp, op in zip(target.parameters(), online.parameters()):
        if tau == 1.0:
            tp.copy_(op)
        else:
            tp.mul_(1.0 - tau).add_(op, alpha=tau)


# ---------------------------------------------------------------------------
# parameter snapshots and checkpoints


@dataclass(frozen=True)
class ParameterSet:
    """Immutable copy of every network weight plus a monotone version."""

    tensors: Mapping[str, np.ndarray]
    version: int = 0

    @classmethod
    def capture(cls, modules: Mapping[str, nn.Module], version: int) -> "ParameterSet":
        tensors = {}
        for prefix, module in modules.items():
            for name, value in module.state_dict().items():
                arr = value.detach().cpu().numpy().copy()
                arr.setflags(write=False)
                tensors[f"{prefix}.{name}"] = arr
        return cls(tensors=tensors, version=version)

    def restore(self, modules: Mapping[str, nn.Module]) -> None:
        for prefix, module in modules.items():
            state = {
                name[len(prefix) + 1 :]: torch.from_numpy(np.array(arr))
                for name, arr in self.tensors.items()
                if name.startswith(prefix + ".")
            }
            module.load_state_dict(state)

    @cached_property
    def _digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def checksum(self) -> str:
        return self._digest


_MAGIC = b"RTSACPS1"


def save_parameters(params: ParameterSet, path: str | Path) -> None:
    """Flat little-endian binary: header, shape table, then float32 data."""
    names = sorted(params.tensors)
    out = bytearray(_MAGIC)
    out += struct.pack("<QI", params.version, len(names))
    for name in names:
        arr = params.tensors[name]
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for name in names:
        out += np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_parameters(path: str | Path) -> ParameterSet:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<QI", data, pos)
    pos += struct.calcsize("<QI")
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        arr.setflags(write=False)
        tensors[name] = arr
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return ParameterSet(tensors=tensors, version=version)


def describe_parameters(params: ParameterSet) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(params.tensors[name].shape)) for name in sorted(params.tensors)]
