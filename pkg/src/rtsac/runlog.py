"""Run records: per-step, per-update and event logs with CSV emission.

Every process appends through a non-blocking queue; records are drained by
a single reader and ordered by timestamp when emitted.
"""

from __future__ import annotations

import csv
import dataclasses
import queue
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable


@dataclass(frozen=True)
class StepRecord:
    step: int  # 1-based training step (warmup excluded)
    episode: int
    t_us: int  # observation/action time of the transition's first state
    cycle_us: int  # realized action cycle: time to the next observation
    raw_reward: float
    scaled_reward: float
    param_version: int
    newest_frame_us: int
    interaction_us: int = 0  # boundary wake-up to actuation, including reward and push
    overrun: bool = False


@dataclass(frozen=True)
class UpdateRecord:
    index: int  # 1-based
    sample_start_us: int
    sample_end_us: int
    update_start_us: int
    update_end_us: int
    batch_version: int  # parameter version when the batch was sampled
    version_after: int
    env_steps: int  # training steps completed when sampling started
    ok: bool
    q_loss: float = float("nan")
    pi_loss: float = float("nan")
    q_mean: float = float("nan")
    entropy: float = float("nan")


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    reset_start_us: int
    start_us: int
    end_us: int
    steps: int


@dataclass(frozen=True)
class EventRecord:
    t_us: int
    kind: str
    detail: str = ""


@dataclass
class RunLog:
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._steps: list[StepRecord] = []
        self._updates: list[UpdateRecord] = []
        self._episodes: list[EpisodeRecord] = []
        self._events: list[EventRecord] = []

    def append(self, record: StepRecord | UpdateRecord | EpisodeRecord | EventRecord) -> None:
        self._queue.put_nowait(record)

    def drain(self) -> None:
        while True:
            try:
                rec = self._queue.get_nowait()
            except queue.Empty:
                return
            if isinstance(rec, StepRecord):
                self._steps.append(rec)
            elif isinstance(rec, UpdateRecord):
                self._updates.append(rec)
            elif isinstance(rec, EpisodeRecord):
                self._episodes.append(rec)
            else:
                self._events.append(rec)

    @property
    def steps(self) -> list[StepRecord]:
        self.drain()
        return sorted(self._steps, key=lambda r: (r.t_us, r.step))

    @property
    def updates(self) -> list[UpdateRecord]:
        self.drain()
        return sorted(self._updates, key=lambda r: (r.update_start_us, r.index))

    @property
    def episodes(self) -> list[EpisodeRecord]:
        self.drain()
        return sorted(self._episodes, key=lambda r: r.episode)

    @property
    def events(self) -> list[EventRecord]:
        self.drain()
        return sorted(self._events, key=lambda r: r.t_us)

    def episode_returns(self) -> list[float]:
        """Sum of scaled rewards per training episode, in episode order."""
        totals: dict[int, float] = {}
        for r in self.steps:
            totals[r.episode] = totals.get(r.episode, 0.0) + r.scaled_reward
        return [totals[k] for k in sorted(totals)]


def write_records(path: str | Path, records: Iterable[Any], record_type: type) -> None:
    names = [f.name for f in dataclasses.fields(record_type)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, n)) for n in names])


def _fmt(value: Any) -> Any:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(float(value))
    return value


def read_records(path: str | Path, record_type: type) -> list[Any]:
    types = {f.name: f.type for f in dataclasses.fields(record_type)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kwargs = {}
            for name, raw in row.items():
                t = types[name]
                if t in ("int", int):
                    kwargs[name] = int(raw)
                elif t in ("bool", bool):
                    kwargs[name] = bool(int(raw))
                elif t in ("float", float):
                    kwargs[name] = float(raw)
                else:
                    kwargs[name] = raw
            out.append(record_type(**kwargs))
    return out
