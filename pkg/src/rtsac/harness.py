"""Experiment driver: settings, warmup, budgets, metrics and result files."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from rtsac.clock import ClockMode, CostProfile, make_clock
from rtsac.envsim import MAX_JOINT_SPEED, N_JOINTS, EnvConfig, RealTimeEnv
from rtsac.execution import (
    Architecture,
    CycleConfig,
    Interaction,
    Learner,
    Orchestrator,
    ParamSlot,
    RunPlan,
    min_action_cycle,
    scale_reward,
)
from rtsac.replay import ReplayBuffer, crop_dims
from rtsac.runlog import EpisodeRecord, EventRecord, RunLog, StepRecord, UpdateRecord, read_records, write_records
from rtsac.sac import Policy, SACAgent, SACConfig

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "SETTINGS",
    "Setting",
    "aggregate",
    "load_config_file",
    "overall_performance",
    "profile_components",
    "run_experiment",
    "scale_reward",
    "warmup",
    "write_outputs",
]


@dataclass(frozen=True)
class Setting:
    name: str
    height: int
    width: int
    batch_size: int
    costs: CostProfile  # injected per-component costs for the virtual clock
    updates_cap: int  # default cap for the async architectures


SETTINGS: dict[str, Setting] = {
    "baseline": Setting("baseline", 24, 32, 32, CostProfile(10, 15, 30), updates_cap=1),
    "highres": Setting("highres", 48, 64, 32, CostProfile(15, 25, 60), updates_cap=0),
    "largebatch": Setting("largebatch", 24, 32, 128, CostProfile(10, 60, 110), updates_cap=0),
}
SETTING_ALIASES = {"high_resolution": "highres", "large_minibatch": "largebatch"}


def get_setting(name: str) -> Setting:
    key = SETTING_ALIASES.get(name, name)
    if key not in SETTINGS:
        raise ValueError(f"unknown setting {name!r}; choose from {sorted(SETTINGS)}")
    return SETTINGS[key]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    arch: str = "async2"
    setting: str = "baseline"
    task: str = "reaching"
    clock: str = "virtual"
    seed: int = 0
    budget_s: float = 600.0
    # timing; negative values mean "take from the setting"
    interaction_ms: float = -1.0
    sample_ms: float = -1.0
    update_ms: float = -1.0
    margin_ms: float = 10.0
    cycle_ms: int = 0  # 0 = smallest aligned cycle that fits the costs
    updates_cap: int = -1
    # data
    warmup_steps: int = 1000
    buffer_capacity: int = 100_000
    batch_size: int = 0  # 0 = from the setting
    crop_ratio: float = 0.9
    # learning
    gamma: float = 0.95
    alpha_ent: float = 0.1
    tau: float = 0.005
    critic_reward_scale: float = 0.3
    lr: float = 3e-4
    hidden: int = 128
    filters: str = "8,16"
    strides: str = ""  # empty = stride 2 on the first conv only
    # environment
    height: int = 0  # 0 = from the setting
    width: int = 0
    fov_width: float = 1.5
    target_radius: float = 0.15
    target_speed: float = 0.25
    target_window: float = 0.8
    episode_ms: float = 4000.0
    reset_ms: float = 3000.0
    reward_alpha: float = 800.0
    reward_beta: float = 1.0
    # run control
    max_updates: int = 0  # 0 = until the budget expires
    max_steps: int = 0
    torch_threads: int = 1

    def __post_init__(self) -> None:
        Architecture(self.arch)
        ClockMode(self.clock)
        get_setting(self.setting)
        if self.task not in ("reaching", "tracking"):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def setting_params(self) -> Setting:
        return get_setting(self.setting)

    def costs(self) -> CostProfile:
        base = self.setting_params.costs
        pick = lambda v, d: d if v < 0 else v  # noqa: E731
        return CostProfile(
            pick(self.interaction_ms, base.interaction_ms),
            pick(self.sample_ms, base.sample_ms),
            pick(self.update_ms, base.update_ms),
        )

    def action_cycle_ms(self) -> int:
        if self.cycle_ms:
            return self.cycle_ms
        return min_action_cycle(self.costs(), self.arch, self.margin_ms)

    def image_dims(self) -> tuple[int, int]:
        s = self.setting_params
        return self.height or s.height, self.width or s.width

    def effective_batch_size(self) -> int:
        return self.batch_size or self.setting_params.batch_size

    def effective_cap(self) -> int:
        if Architecture(self.arch) is Architecture.SEQ:
            return 0
        return self.setting_params.updates_cap if self.updates_cap < 0 else self.updates_cap

    def env_config(self) -> EnvConfig:
        h, w = self.image_dims()
        return EnvConfig(
            height=h,
            width=w,
            task=self.task,  # type: ignore[arg-type]
            fov_width=self.fov_width,
            target_radius=self.target_radius,
            target_speed=self.target_speed,
            target_window=self.target_window,
            episode_ms=self.episode_ms,
            reset_ms=self.reset_ms,
            reward_alpha=self.reward_alpha,
            reward_beta=self.reward_beta,
        )

    def sac_config(self) -> SACConfig:
        return SACConfig(
            gamma=self.gamma,
            alpha_ent=self.alpha_ent,
            tau=self.tau,
            critic_reward_scale=self.critic_reward_scale,
            actor_lr=self.lr,
            critic_lr=self.lr,
            updates_per_step=self.effective_cap(),
            hidden=self.hidden,
            filters=_int_tuple(self.filters),
            strides=_int_tuple(self.strides) or None,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].type, raw)
        return cls(**kwargs)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(f) for f in str(text).split(",") if f.strip())


def _coerce(type_name: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    t = type_name if isinstance(type_name, str) else type_name.__name__
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


# ---------------------------------------------------------------------------
# warmup and metrics


def warmup(interaction: Interaction, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Push ``n`` transitions collected with uniformly random joint speeds."""
    actions: list[np.ndarray] = []

    def act(_obs):
        a = rng.uniform(-MAX_JOINT_SPEED, MAX_JOINT_SPEED, N_JOINTS)
        actions.append(a)
        return a, 0

    while interaction.warmup_pushes < n:
        interaction.run_episode(act, training=False, push_limit=n - interaction.warmup_pushes)
    return actions


def overall_performance(runlog: RunLog | Sequence[float]) -> float:
    """Mean episode return (sum of scaled rewards) over all training episodes."""
    returns = runlog.episode_returns() if isinstance(runlog, RunLog) else list(runlog)
    if not returns:
        raise ValueError("no training episodes logged")
    return float(np.mean(returns))


def profile_components(runlog: RunLog, min_updates: int = 100) -> dict[str, float]:
    """Median interaction, sample and update durations in milliseconds."""
    updates = runlog.updates
    if len(updates) < min_updates:
        raise ValueError(f"need at least {min_updates} update records, got {len(updates)}")
    steps = runlog.steps
    return {
        "interaction_ms": statistics.median(r.interaction_us for r in steps) / 1000.0,
        "sample_ms": statistics.median(r.sample_end_us - r.sample_start_us for r in updates) / 1000.0,
        "update_ms": statistics.median(r.update_end_us - r.update_start_us for r in updates) / 1000.0,
    }


def cycle_stats(runlog: RunLog) -> dict[str, float]:
    cycles = [r.cycle_us / 1000.0 for r in runlog.steps]
    if not cycles:
        return {}
    return {
        "mean_ms": float(np.mean(cycles)),
        "min_ms": float(np.min(cycles)),
        "max_ms": float(np.max(cycles)),
        "overruns": int(sum(r.overrun for r in runlog.steps)),
    }


def update_periods_ms(runlog: RunLog) -> list[float]:
    starts = [r.update_start_us for r in runlog.updates]
    return [(b - a) / 1000.0 for a, b in zip(starts, starts[1:])]


def stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


# ---------------------------------------------------------------------------
# running


@dataclass
class RunResult:
    config: ExperimentConfig
    runlog: RunLog
    agent: SACAgent
    orchestrator: Orchestrator
    buffer: ReplayBuffer
    warmup_actions: list[np.ndarray] = field(default_factory=list)
    warmup_buffer_size: int = 0

    @property
    def interaction(self) -> Interaction:
        return self.orchestrator.interaction

    @property
    def training_time_ms(self) -> float:
        o = self.orchestrator
        return (o.training_end_us - o.training_start_us) / 1000.0

    def summary(self) -> dict[str, Any]:
        cfg = self.config
        returns = self.runlog.episode_returns()
        out: dict[str, Any] = {
            "arch": cfg.arch,
            "setting": cfg.setting,
            "task": cfg.task,
            "clock": cfg.clock,
            "seed": cfg.seed,
            "action_cycle_ms": cfg.action_cycle_ms(),
            "batch_size": cfg.effective_batch_size(),
            "updates_cap": cfg.effective_cap(),
            "training_time_s": self.training_time_ms / 1000.0,
            "episodes": len(returns),
            "steps": self.interaction.steps_done,
            "updates": self.orchestrator.learner.updates,
            "update_faults": self.agent.faults,
            "overall_performance": overall_performance(returns) if returns else None,
            "cycle": cycle_stats(self.runlog),
        }
        try:
            out["profile"] = profile_components(self.runlog)
        except ValueError:
            out["profile"] = None
        return out


def run_experiment(cfg: ExperimentConfig, load_params=None) -> RunResult:
    torch.set_num_threads(max(1, cfg.torch_threads))
    arch = Architecture(cfg.arch)
    clock = make_clock(cfg.clock, cfg.costs())
    env_cfg = cfg.env_config()
    cycle = CycleConfig(cfg.action_cycle_ms(), cfg.margin_ms)
    runlog = RunLog(metadata={"arch": cfg.arch, "setting": cfg.setting, "seed": cfg.seed})
    env = RealTimeEnv(env_cfg, clock, np.random.default_rng([cfg.seed, 0]))
    frame_shape = (9, env_cfg.height, env_cfg.width)
    buffer = ReplayBuffer(cfg.buffer_capacity, frame_shape)
    crop = crop_dims(env_cfg.height, env_cfg.width, cfg.crop_ratio)
    sac_cfg = cfg.sac_config()
    agent = SACAgent(sac_cfg, seed=cfg.seed)
    if load_params is not None:
        agent.load(load_params)
    policy = Policy(sac_cfg, crop, seed=cfg.seed)
    params = ParamSlot(agent.snapshot())
    interaction = Interaction(env, buffer, clock, cycle, runlog)
    learner = Learner(
        agent,
        buffer,
        clock,
        params,
        runlog,
        cfg.effective_batch_size(),
        crop,
        np.random.default_rng([cfg.seed, 1]),
        stop_after_updates=cfg.max_updates or None,
    )
    plan = RunPlan(arch, cfg.budget_s * 1000.0, cfg.effective_cap(), cfg.max_steps or None)
    warm_rng = np.random.default_rng([cfg.seed, 2])
    collected: list[np.ndarray] = []
    sizes: list[int] = []

    def do_warmup(inter: Interaction) -> None:
        collected.extend(warmup(inter, cfg.warmup_steps, warm_rng))
        sizes.append(len(buffer))

    orch = Orchestrator(plan, clock, interaction, learner, policy, params, warmup=do_warmup)
    orch.run()
    return RunResult(cfg, runlog, agent, orch, buffer, collected, sizes[0] if sizes else 0)


# ---------------------------------------------------------------------------
# outputs


def curve_rows(runlog: RunLog) -> list[dict[str, float]]:
    rows = []
    by_episode: dict[int, list[StepRecord]] = {}
    for r in runlog.steps:
        by_episode.setdefault(r.episode, []).append(r)
    for ep in sorted(by_episode):
        recs = by_episode[ep]
        rows.append(
            {
                "episode": ep,
                "first_step": recs[0].step,
                "last_step": recs[-1].step,
                "t_end_s": float((recs[-1].t_us + recs[-1].cycle_us) / 1e6),
                "return": float(sum(r.scaled_reward for r in recs)),
            }
        )
    return rows


def write_outputs(result: RunResult, out: str | Path) -> dict[str, Any]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log_ = result.runlog
    write_records(out / "runlog.csv", log_.steps, StepRecord)
    write_records(out / "updates.csv", log_.updates, UpdateRecord)
    write_records(out / "episodes.csv", log_.episodes, EpisodeRecord)
    write_records(out / "events.csv", log_.events, EventRecord)
    rows = curve_rows(log_)
    with open(out / "curve.csv", "w") as fh:
        fh.write("episode,first_step,last_step,t_end_s,return\n")
        for r in rows:
            fh.write(f"{r['episode']},{r['first_step']},{r['last_step']},{r['t_end_s']!r},{r['return']!r}\n")
    (out / "config.txt").write_text(result.config.to_text())
    summary = result.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def returns_from_csv(path: str | Path) -> list[float]:
    totals: dict[int, float] = {}
    for r in read_records(path, StepRecord):
        totals[r.episode] = totals.get(r.episode, 0.0) + r.scaled_reward
    return [totals[k] for k in sorted(totals)]


def aggregate(run_dirs: Iterable[str | Path]) -> dict[str, Any]:
    """Overall performance per run recomputed from runlog.csv, then mean and standard error."""
    per_run = {}
    for d in run_dirs:
        per_run[str(d)] = overall_performance(returns_from_csv(Path(d) / "runlog.csv"))
    values = list(per_run.values())
    if not values:
        raise ValueError("no runs given")
    return {"runs": per_run, "mean": float(np.mean(values)), "stderr": stderr(values), "n": len(values)}
