"""The three learning architectures and the machinery they share.

* ``seq``: one process observes, acts, samples and updates, then waits for
  the next aligned cycle boundary.
* ``async1``: the interaction process keeps its own cadence; a learner
  process samples and updates back to back.
* ``async2``: as ``async1`` but sampling and updating are separate stages
  joined by a single-slot handoff, so batch k+1 is sampled while update k
  runs.

All code is written against :class:`~rtsac.clock.Clock`, so the same loops
run under the virtual and the wall clock.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from rtsac.clock import Clock, Component, CostProfile, Priority, ms_to_us
from rtsac.envsim import Observation, RealTimeEnv, episode_steps
from rtsac.nn import ParameterSet
from rtsac.replay import Batch, NotReady, ReplayBuffer, Transition
from rtsac.runlog import EpisodeRecord, EventRecord, RunLog, StepRecord, UpdateRecord
from rtsac.sac import Policy, SACAgent
from rtsac.sync import Handoff, LatestSlot

log = logging.getLogger(__name__)

ARM_CADENCE_MS = 8
CAMERA_CADENCE_MS = 40
ALIGNMENT_MS = 40  # lcm of the arm and camera cadences
REWARD_BASE_MS = 40


class Architecture(str, enum.Enum):
    SEQ = "seq"
    ASYNC1 = "async1"
    ASYNC2 = "async2"

    @property
    def asynchronous(self) -> bool:
        return self is not Architecture.SEQ


def align(ms: float, base: int = ALIGNMENT_MS) -> int:
    """Smallest positive multiple of ``base`` that is >= ``ms``."""
    if ms < 0:
        raise ValueError(f"negative duration {ms}")
    return max(1, math.ceil(ms / base - 1e-9)) * base


def min_action_cycle(costs: CostProfile, arch: Architecture | str, margin_ms: float = 10.0) -> int:
    arch = Architecture(arch)
    busy = costs.interaction_ms + margin_ms
    if arch is Architecture.SEQ:
        busy += costs.sample_ms + costs.update_ms
    return align(busy)


@dataclass(frozen=True)
class CycleConfig:
    action_cycle_ms: int
    margin_ms: float = 10.0
    arm_cadence_ms: int = ARM_CADENCE_MS
    camera_cadence_ms: int = CAMERA_CADENCE_MS

    def __post_init__(self) -> None:
        if self.action_cycle_ms <= 0 or self.action_cycle_ms % ALIGNMENT_MS:
            raise ValueError(f"action cycle must be a positive multiple of {ALIGNMENT_MS}ms, got {self.action_cycle_ms}")


def throttle(updates_done: int, env_steps_done: int, cap: int) -> bool:
    """True when another update may start: uncapped, or below ``cap`` updates per step."""
    if cap < 0:
        raise ValueError("cap must be >= 0")
    return cap == 0 or updates_done < cap * env_steps_done


def scale_reward(raw: float, action_cycle_ms: float, base_ms: float = REWARD_BASE_MS) -> float:
    if not action_cycle_ms > 0:
        raise ValueError("action cycle must be positive")
    return raw * (action_cycle_ms / base_ms)


class ParamSlot:
    """Latest-wins publication of parameter snapshots from the gradient stage."""

    def __init__(self, initial: ParameterSet) -> None:
        self._slot: LatestSlot[ParameterSet] = LatestSlot(initial=initial)

    def publish(self, params: ParameterSet) -> None:
        current = self._slot.read()
        if current is not None and params.version < current.version:
            raise ValueError(f"version went backwards: {params.version} < {current.version}")
        self._slot.write(params)

    def fetch_latest(self) -> ParameterSet:
        return self._slot.read()  # type: ignore[return-value]

    @property
    def publishes(self) -> int:
        return self._slot.writes


# ---------------------------------------------------------------------------
# interaction


ActFn = Callable[[Observation], "tuple[np.ndarray, int]"]


class Interaction:
    """Episode loop with absolute cycle deadlines, shared by every architecture."""

    def __init__(
        self,
        env: RealTimeEnv,
        buffer: ReplayBuffer,
        clock: Clock,
        cycle: CycleConfig,
        runlog: RunLog,
    ) -> None:
        self.env = env
        self.buffer = buffer
        self.clock = clock
        self.cycle_ms = cycle.action_cycle_ms
        self.cycle_us = ms_to_us(cycle.action_cycle_ms)
        self.steps_per_episode = episode_steps(cycle.action_cycle_ms, env.cfg.episode_ms)
        self.runlog = runlog
        self.steps_done = 0  # training transitions pushed
        self.warmup_pushes = 0
        self.episodes_done = 0
        self.overruns = 0

    def run_episode(
        self,
        act: ActFn,
        *,
        training: bool,
        after_act: Callable[[], None] | None = None,
        push_limit: int | None = None,
    ) -> int:
        """Reset, then act at every boundary t0 + k * cycle; returns transitions pushed."""
        clock = self.clock
        reset_start = clock.now()
        self.env.reset()
        t0 = clock.now()
        n = self.steps_per_episode
        episode = self.episodes_done
        pushed = 0
        prev: tuple[Observation, np.ndarray, int, bool, int] | None = None
        k = 0
        while True:
            clock.wait_until(t0 + k * self.cycle_us)
            woke = clock.now()
            obs = self.env.assemble_observation()
            if prev is not None:
                self._complete(prev, obs, training, episode)
                pushed += 1
                if push_limit is not None and pushed >= push_limit:
                    break
            if k >= n:
                break
            action, version = act(obs)
            clock.charge(Component.INTERACTION)
            self.env.actuate(action)
            busy = clock.now() - woke
            overrun = False
            if after_act is not None:
                after_act()
            nxt = k + 1
            late = clock.now() - (t0 + nxt * self.cycle_us)
            if late > 0:
                # realign to the next absolute boundary; never slip the grid
                nxt = min(n, k + 1 + -(-late // self.cycle_us))
                overrun = True
                self.overruns += 1
                self.runlog.append(EventRecord(clock.now(), "overrun", f"step {k} late by {late}us"))
            prev = (obs, np.asarray(action, dtype=np.float64), version, overrun, busy)
            k = nxt
        if training:
            self.runlog.append(EpisodeRecord(episode, reset_start, t0, clock.now(), pushed))
            self.episodes_done += 1
        return pushed

    def _complete(self, prev, obs: Observation, training: bool, episode: int) -> None:
        prev_obs, action, version, overrun, busy = prev
        raw = self.env.reward(obs)
        scaled = scale_reward(raw, self.cycle_ms)
        ok = self.buffer.push(Transition(prev_obs, action, scaled, obs, done=False))
        if not ok:
            self.runlog.append(EventRecord(self.clock.now(), "fault", "transition rejected"))
            return
        if training:
            self.steps_done += 1
            self.runlog.append(
                StepRecord(
                    step=self.steps_done,
                    episode=episode,
                    t_us=prev_obs.t,
                    cycle_us=obs.t - prev_obs.t,
                    raw_reward=raw,
                    scaled_reward=scaled,
                    param_version=version,
                    newest_frame_us=prev_obs.frame_times[-1],
                    interaction_us=busy,
                    overrun=overrun,
                )
            )
        else:
            self.warmup_pushes += 1
        self.clock.notify()


# ---------------------------------------------------------------------------
# learning


class Learner:
    """Sampling and gradient stages around one :class:`SACAgent`."""

    def __init__(
        self,
        agent: SACAgent,
        buffer: ReplayBuffer,
        clock: Clock,
        params: ParamSlot,
        runlog: RunLog,
        batch_size: int,
        crop: tuple[int, int] | None,
        rng: np.random.Generator,
        stop_after_updates: int | None = None,
    ) -> None:
        self.agent = agent
        self.buffer = buffer
        self.clock = clock
        self.params = params
        self.runlog = runlog
        self.batch_size = batch_size
        self.crop = crop
        self.rng = rng
        self.stop_after_updates = stop_after_updates
        self.updates = 0
        self.batches_started = 0
        self.batches_issued = 0
        self.env_steps: Callable[[], int] = lambda: 0

    def ready(self) -> bool:
        return len(self.buffer) >= self.batch_size

    @property
    def in_flight(self) -> int:
        """Batches whose sampling has started but whose update has not finished."""
        return self.batches_started - self.updates

    def sample(self) -> tuple[Batch, int, int]:
        start = self.clock.now()
        steps = self.env_steps()
        self.batches_started += 1
        try:
            batch = self.buffer.sample(self.batch_size, self.rng, self.crop, version=self.agent.version, t=start)
        except NotReady:
            raise RuntimeError("sampling started before the buffer held a full batch") from None
        self.clock.charge(Component.SAMPLE)
        self.batches_issued += 1
        return batch, self.clock.now(), steps

    def update(self, item: tuple[Batch, int, int]) -> None:
        batch, sample_end, steps = item
        start = self.clock.now()
        metrics = self.agent.update(batch)
        self.clock.charge(Component.UPDATE)
        if metrics is not None:
            self.params.publish(self.agent.snapshot())
        self.updates += 1
        m = metrics or {}
        self.runlog.append(
            UpdateRecord(
                index=self.updates,
                sample_start_us=batch.sampled_at,
                sample_end_us=sample_end,
                update_start_us=start,
                update_end_us=self.clock.now(),
                batch_version=batch.sampled_at_version,
                version_after=self.agent.version,
                env_steps=steps,
                ok=metrics is not None,
                **{k: float(m.get(k, float("nan"))) for k in ("q_loss", "pi_loss", "q_mean", "entropy")},
            )
        )
        self.clock.notify()
        if self.stop_after_updates is not None and self.updates >= self.stop_after_updates:
            self.clock.stop()


@dataclass
class RunPlan:
    arch: Architecture
    budget_ms: float  # training time, resets included, warmup excluded
    updates_cap: int = 0  # async only; 0 = uncapped
    max_training_steps: int | None = None


class Orchestrator:
    """Wires interaction and learning processes for one architecture and runs them."""

    def __init__(
        self,
        plan: RunPlan,
        clock: Clock,
        interaction: Interaction,
        learner: Learner,
        policy: Policy,
        params: ParamSlot,
        warmup: Callable[[Interaction], None] | None = None,
    ) -> None:
        self.plan = plan
        self.clock = clock
        self.interaction = interaction
        self.learner = learner
        self.policy = policy
        self.params = params
        self.warmup = warmup
        self.training_start_us: int | None = None
        self.training_end_us: int | None = None
        self.finished = False
        learner.env_steps = lambda: interaction.steps_done

    def act(self, obs: Observation) -> tuple[np.ndarray, int]:
        self.policy.load(self.params.fetch_latest())
        return self.policy.act(obs), self.policy.version

    def _seq_step(self) -> None:
        if self.learner.ready():
            self.learner.update(self.learner.sample())

    def _may_sample(self, issued: Callable[[], int]) -> Callable[[], bool]:
        cap = self.plan.updates_cap
        return lambda: (
            not self.finished and self.learner.ready() and throttle(issued(), self.interaction.steps_done, cap)
        )

    def _async1(self) -> None:
        ok = self._may_sample(lambda: self.learner.updates)
        while True:
            self.clock.wait_for(ok)
            self.learner.update(self.learner.sample())

    def _async2_sampler(self, handoff: Handoff) -> None:
        ok = self._may_sample(lambda: self.learner.batches_issued)
        while True:
            self.clock.wait_for(ok)
            handoff.put(self.learner.sample())

    def _async2_updater(self, handoff: Handoff) -> None:
        while True:
            self.learner.update(handoff.take())

    def _main(self) -> None:
        inter = self.interaction
        inter.env.start()
        if self.warmup is not None:
            self.warmup(inter)
        arch = self.plan.arch
        if arch is Architecture.ASYNC1:
            self.clock.spawn("learner", self._async1, Priority.SAMPLE)
        elif arch is Architecture.ASYNC2:
            handoff: Handoff = Handoff(self.clock)
            self.clock.spawn("sampler", lambda: self._async2_sampler(handoff), Priority.SAMPLE)
            self.clock.spawn("updater", lambda: self._async2_updater(handoff), Priority.UPDATE)
        after_act = self._seq_step if arch is Architecture.SEQ else None
        budget_us = ms_to_us(self.plan.budget_ms)
        reset_us = ms_to_us(inter.env.cfg.reset_ms)
        self.training_start_us = start = self.clock.now()
        try:
            while self.clock.now() - start + reset_us < budget_us:
                limit = None
                if self.plan.max_training_steps is not None:
                    limit = self.plan.max_training_steps - inter.steps_done
                    if limit <= 0:
                        break
                inter.run_episode(self.act, training=True, after_act=after_act, push_limit=limit)
        finally:
            self.training_end_us = self.clock.now()
            self.finished = True
        # let batches already being sampled or updated complete; start no new ones
        self.clock.notify()
        self.clock.wait_for(lambda: self.learner.in_flight == 0)
        self.clock.stop()

    def run(self) -> None:
        self.clock.spawn("interaction", self._main, Priority.INTERACTION)
        self.clock.run()
