"""Soft Actor-Critic losses and the single gradient-update step."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from rtsac.envsim import Observation
from rtsac.nn import Actor, Critic, ParameterSet, make_adam, polyak_update, sample_squashed
from rtsac.replay import Batch, center_crop

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class SACConfig:
    gamma: float = 0.99
    alpha_ent: float = 0.1
    tau: float = 0.005
    critic_reward_scale: float = 1.0  # rewards are multiplied by this inside the critic target
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    updates_per_step: int = 0  # 0 = uncapped
    twin_critics: bool = True
    value_samples: int = 1
    hidden: int = 128
    filters: tuple[int, ...] = (8, 16)
    strides: tuple[int, ...] | None = None  # None = stride 2 on the first conv only
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not self.alpha_ent > 0.0:
            raise ValueError(f"entropy temperature must be positive, got {self.alpha_ent}")
        if self.updates_per_step < 0:
            raise ValueError("updates_per_step must be >= 0")
        if self.value_samples < 1:
            raise ValueError("value_samples must be >= 1")
        if not self.critic_reward_scale > 0:
            raise ValueError("critic_reward_scale must be positive")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        self.filters = tuple(self.filters)
        if self.strides is not None:
            self.strides = tuple(self.strides)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


class TensorBatch(NamedTuple):
    frames: torch.Tensor
    proprio: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    next_frames: torch.Tensor
    next_proprio: torch.Tensor
    done: torch.Tensor


def frames_to_tensor(frames: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(frames))
    return t.to(dtype) / 255.0 if t.dtype == torch.uint8 else t.to(dtype)


def as_tensors(batch: Batch, dtype: torch.dtype = torch.float32) -> TensorBatch:
    def f(a: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a), dtype=dtype)

    return TensorBatch(
        frames=frames_to_tensor(batch.frames, dtype),
        proprio=f(batch.proprio),
        action=f(batch.action),
        reward=f(batch.reward),
        next_frames=frames_to_tensor(batch.next_frames, dtype),
        next_proprio=f(batch.next_proprio),
        done=f(batch.done),
    )


# ---------------------------------------------------------------------------
# losses


def soft_value_target(
    actor: Actor,
    critic: Critic,
    critic_target: Critic,
    next_frames: torch.Tensor,
    next_proprio: torch.Tensor,
    alpha: float,
    *,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    samples: int = 1,
) -> torch.Tensor:
    """min_i Q_target_i(s', a') - alpha * log pi(a'|s') with a' ~ pi(.|s'); no gradient."""
    with torch.no_grad():
        feats = critic.encoder(next_frames)
        mean, log_std = actor(feats, next_proprio)
        target_feats = critic_target.encoder(next_frames)
        total = torch.zeros(next_frames.shape[0], dtype=next_frames.dtype)
        for k in range(samples):
            eps = None if noise is None else noise[k] if samples > 1 else noise
            a, logp = sample_squashed(mean, log_std, eps, generator=generator)
            qs = critic_target(next_frames, next_proprio, a, features=target_feats)
            total = total + torch.min(torch.stack(qs), dim=0).values - alpha * logp
        return total / samples


def q_loss(
    critic: Critic,
    frames: torch.Tensor,
    proprio: torch.Tensor,
    action: torch.Tensor,
    reward: torch.Tensor,
    done: torch.Tensor,
    v_hat: torch.Tensor,
    gamma: float,
    features: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over batch and critics of 1/2 (Q(s, a) - (r + gamma (1 - done) V))^2."""
    target = reward + gamma * (1.0 - done) * v_hat.detach()
    qs = critic(frames, proprio, action, features=features)
    return 0.5 * torch.stack([(q - target) ** 2 for q in qs]).mean()


def policy_loss(
    actor: Actor,
    critic: Critic,
    frames: torch.Tensor,
    proprio: torch.Tensor,
    alpha: float,
    *,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    features: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of alpha * log pi(a|s) - min_i Q_i(s, a) over reparameterized actions.

    The encoder is shared with the critic and receives no gradient from here.
    Returns the loss and the per-sample log-probabilities.
    """
    feats = critic.encoder(frames) if features is None else features
    feats = feats.detach()
    mean, log_std = actor(feats, proprio)
    a, logp = sample_squashed(mean, log_std, noise, generator=generator)
    qs = critic(frames, proprio, a, features=feats)
    q = torch.min(torch.stack(qs), dim=0).values
    return (alpha * logp - q).mean(), logp


# ---------------------------------------------------------------------------
# agent


def build_networks(
    cfg: SACConfig, in_channels: int, proprio_dim: int, action_dim: int, seed: int
) -> tuple[Actor, Critic, Critic]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        critic = Critic(proprio_dim, action_dim, cfg.hidden, cfg.filters, in_channels, cfg.twin_critics, cfg.strides)
        actor = Actor(critic.encoder.feature_dim, proprio_dim, action_dim, cfg.hidden)
    critic.to(cfg.torch_dtype)
    actor.to(cfg.torch_dtype)
    critic_target = copy.deepcopy(critic)
    critic_target.requires_grad_(False)
    return actor, critic, critic_target


class SACAgent:
    """Owns the online parameters, optimizers and target networks.

    Only the gradient stage touches an agent; other processes receive
    immutable :class:`ParameterSet` snapshots.
    """

    def __init__(
        self,
        cfg: SACConfig,
        in_channels: int = 9,
        proprio_dim: int = 15,
        action_dim: int = 5,
        seed: int = 0,
    ) -> None:
        self.cfg = cfg
        self.actor, self.critic, self.critic_target = build_networks(cfg, in_channels, proprio_dim, action_dim, seed)
        self.critic_opt = make_adam(self.critic.parameters(), cfg.critic_lr)
        self.actor_opt = make_adam(self.actor.parameters(), cfg.actor_lr)
        self.generator = torch.Generator().manual_seed(seed + 1)
        self.version = 0
        self.faults = 0

    @property
    def modules(self) -> dict[str, torch.nn.Module]:
        return {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}

    def snapshot(self) -> ParameterSet:
        return ParameterSet.capture(self.modules, self.version)

    def load(self, params: ParameterSet) -> None:
        params.restore(self.modules)
        for module in self.modules.values():
            module.to(self.cfg.torch_dtype)
        self.version = params.version

    def update(self, batch: Batch | TensorBatch) -> dict[str, float] | None:
        """One critic step, one policy step and one target refresh.

        Returns metrics, or None when a non-finite loss or gradient aborted the
        update (parameters and optimizer state are then untouched).
        """
        cfg = self.cfg
        tb = batch if isinstance(batch, TensorBatch) else as_tensors(batch, cfg.torch_dtype)
        v_hat = soft_value_target(
            self.actor,
            self.critic,
            self.critic_target,
            tb.next_frames,
            tb.next_proprio,
            cfg.alpha_ent,
            generator=self.generator,
            samples=cfg.value_samples,
        )
        feats = self.critic.encoder(tb.frames)
        reward = tb.reward * cfg.critic_reward_scale
        lq = q_loss(self.critic, tb.frames, tb.proprio, tb.action, reward, tb.done, v_hat, cfg.gamma, features=feats)
        lpi, logp = policy_loss(
            self.actor, self.critic, tb.frames, tb.proprio, cfg.alpha_ent, generator=self.generator, features=feats
        )
        if not (torch.isfinite(lq) and torch.isfinite(lpi)):
            return self._abort("non-finite loss")
        critic_params = list(self.critic.parameters())
        actor_params = list(self.actor.parameters())
        gq = torch.autograd.grad(lq, critic_params)
        gpi = torch.autograd.grad(lpi, actor_params)
        if not all(torch.isfinite(g).all() for g in (*gq, *gpi)):
            return self._abort("non-finite gradient")
        for p, g in zip(critic_params, gq):
            p.grad = g
        for p, g in zip(actor_params, gpi):
            p.grad = g
        self.critic_opt.step()
        self.actor_opt.step()
        polyak_update(self.critic_target, self.critic, cfg.tau)
        self.version += 1
        with torch.no_grad():
            q1 = self.critic(tb.frames, tb.proprio, tb.action)[0]
        return {
            "q_loss": lq.item(),
            "pi_loss": lpi.item(),
            "q_mean": q1.mean().item(),
            "entropy": -logp.detach().mean().item(),
        }

    def _abort(self, why: str) -> None:
        self.faults += 1
        log.warning("update aborted: %s", why)
        return None


class Policy:
    """Actor-side copy of the encoder and policy head.

    Refreshed from published snapshots; never trained directly.
    """

    def __init__(
        self,
        cfg: SACConfig,
        crop: tuple[int, int],
        in_channels: int = 9,
        proprio_dim: int = 15,
        action_dim: int = 5,
        seed: int = 0,
    ) -> None:
        self.cfg = cfg
        self.crop = crop
        self.actor, self.critic, _ = build_networks(cfg, in_channels, proprio_dim, action_dim, seed)
        self.generator = torch.Generator().manual_seed(seed + 2)
        self.version = -1

    def load(self, params: ParameterSet) -> None:
        if params.version == self.version:
            return
        params.restore({"actor": self.actor, "critic": self.critic})
        self.actor.to(self.cfg.torch_dtype)
        self.critic.to(self.cfg.torch_dtype)
        self.version = params.version

    @torch.no_grad()
    def act(self, obs: Observation, stochastic: bool = True) -> np.ndarray:
        dtype = self.cfg.torch_dtype
        frames = center_crop(obs.frames[None], *self.crop)
        feats = self.critic.encoder(torch.as_tensor(frames, dtype=dtype))
        mean, log_std = self.actor(feats, torch.as_tensor(obs.proprio[None], dtype=dtype))
        a, _ = sample_squashed(mean, log_std, stochastic=stochastic, generator=self.generator)
        return a[0].double().numpy()
