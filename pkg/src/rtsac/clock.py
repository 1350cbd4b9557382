"""Single time authority for a run.

Every process of a run (device loops, interaction loop, sampling stage,
gradient stage) is written as ordinary blocking code against the
:class:`Clock` interface.  Two implementations exist:

* :class:`WallClock` runs each process on a real thread and uses the
  monotonic wall clock.  ``charge`` is a no-op because real compute already
  consumed real time.
* :class:`VirtualClock` runs the *same* thread bodies under a conservative
  discrete-event scheduler.  Exactly one process executes at a time; the
  scheduler always resumes the earliest pending wakeup, breaking ties by
  process priority and then by submission order.  Compute costs are injected
  through a :class:`CostProfile`, so schedules are bit-for-bit reproducible.

Timestamps are integers in microseconds.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import threading
import time
from dataclasses import dataclass
from typing import Callable

US_PER_MS = 1_000
US_PER_S = 1_000_000


class ClockMode(str, enum.Enum):
    WALL = "wall"
    VIRTUAL = "virtual"


class Component(str, enum.Enum):
    INTERACTION = "interaction"
    SAMPLE = "sample"
    UPDATE = "update"


class Priority(enum.IntEnum):
    """Tie-break order for events scheduled at the same virtual instant."""

    ARM = 0
    MONITOR = 1
    CAMERA = 2
    INTERACTION = 10
    SAMPLE = 20
    UPDATE = 30


@dataclass(frozen=True)
class CostProfile:
    """Per-component compute cost in milliseconds (Virtual mode only)."""

    interaction_ms: float = 0.0
    sample_ms: float = 0.0
    update_ms: float = 0.0

    def __post_init__(self) -> None:
        for name in ("interaction_ms", "sample_ms", "update_ms"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")

    def cost_ms(self, component: Component) -> float:
        return getattr(self, f"{Component(component).value}_ms")

    def cost_us(self, component: Component) -> int:
        return int(round(self.cost_ms(component) * US_PER_MS))


class ClockStopped(Exception):
    """Raised inside a process when the run has been stopped."""


class Deadlock(RuntimeError):
    pass


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


class Clock:
    mode: ClockMode
    costs: CostProfile

    def now(self) -> int:
        raise NotImplementedError

    def wait_until(self, t: int) -> None:
        raise NotImplementedError

    def sleep(self, duration_us: int) -> None:
        self.wait_until(self.now() + int(duration_us))

    def charge(self, component: Component, actual_elapsed_us: int = 0) -> None:
        raise NotImplementedError

    def wait_for(self, predicate: Callable[[], bool]) -> None:
        """Block the calling process until ``predicate()`` holds."""
        raise NotImplementedError

    def notify(self) -> None:
        """Signal that shared state changed; wakes ``wait_for`` callers."""

    def spawn(self, name: str, fn: Callable[[], None], priority: int) -> None:
        raise NotImplementedError

    def every(
        self,
        name: str,
        period_us: int,
        fn: Callable[[], None],
        priority: int,
        start_us: int | None = None,
    ) -> None:
        """Run ``fn`` at ``start_us + k * period_us`` for k = 0, 1, ... until stop."""
        raise NotImplementedError

    def run(self) -> None:
        """Execute spawned processes until all of them have returned."""
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError

    @property
    def stopped(self) -> bool:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Virtual clock


class _Proc:
    __slots__ = ("name", "priority", "wake", "thread", "predicate")

    def __init__(self, name: str, priority: int) -> None:
        self.name = name
        self.priority = priority
        self.wake = threading.Event()
        self.thread: threading.Thread | None = None
        self.predicate: Callable[[], bool] | None = None


class _Periodic:
    __slots__ = ("name", "period", "fn", "priority")

    def __init__(self, name: str, period: int, fn: Callable[[], None], priority: int) -> None:
        self.name = name
        self.period = period
        self.fn = fn
        self.priority = priority


class VirtualClock(Clock):
    """Deterministic discrete-event clock.

    Processes are threads, but only the holder of the scheduling baton runs.
    A process gives the baton up whenever it waits (``wait_until``,
    ``charge``, ``wait_for``) or returns; the scheduler then fires due
    periodic callbacks inline and hands the baton to the next process by
    ``(time, priority, submission order)``.

    ``max_idle_us`` bounds how long virtual time may advance on periodic
    callbacks alone while every process is blocked; beyond it the run is
    declared deadlocked.
    """

    mode = ClockMode.VIRTUAL

    def __init__(
        self,
        costs: CostProfile | None = None,
        *,
        trace: bool = False,
        max_idle_us: int = 3600 * US_PER_S,
    ) -> None:
        self.costs = costs or CostProfile()
        self.max_idle_us = max_idle_us
        self.trace: list[tuple[int, str]] | None = [] if trace else None
        self._now = 0
        self._heap: list[tuple[int, int, int, object]] = []
        self._seq = itertools.count()
        self._blocked: list[_Proc] = []
        self._threads: list[threading.Thread] = []
        self._alive = 0
        self._queued_procs = 0
        self._last_proc_time = 0
        self._stopped = False
        self._errors: list[BaseException] = []
        self._finished = threading.Event()
        self._tls = threading.local()

    # -- public API ---------------------------------------------------------

    def now(self) -> int:
        return self._now

    @property
    def stopped(self) -> bool:
        return self._stopped

    def stop(self) -> None:
        self._stopped = True

    def wait_until(self, t: int) -> None:
        me = self._me()
        if self._stopped:
            raise ClockStopped
        if t <= self._now:
            return
        self._push(int(t), me.priority, me)
        self._switch(me)

    def charge(self, component: Component, actual_elapsed_us: int = 0) -> None:
        self.wait_until(self._now + self.costs.cost_us(component))

    def wait_for(self, predicate: Callable[[], bool]) -> None:
        me = self._me()
        if self._stopped:
            raise ClockStopped
        if predicate():
            return
        me.predicate = predicate
        self._blocked.append(me)
        self._switch(me)

    def spawn(self, name: str, fn: Callable[[], None], priority: int) -> None:
        proc = _Proc(name, int(priority))

        def body() -> None:
            proc.wake.wait()
            proc.wake.clear()
            self._tls.proc = proc
            try:
                if not self._stopped:
                    fn()
            except ClockStopped:
                pass
            except BaseException as exc:  # surfaced from run()
                self._errors.append(exc)
                self._stopped = True
            finally:
                self._alive -= 1
                self._handoff(self._advance())

        proc.thread = threading.Thread(target=body, name=f"virtual:{name}", daemon=True)
        self._threads.append(proc.thread)
        self._alive += 1
        self._push(self._now, proc.priority, proc)
        proc.thread.start()

    def every(
        self,
        name: str,
        period_us: int,
        fn: Callable[[], None],
        priority: int,
        start_us: int | None = None,
    ) -> None:
        if period_us <= 0:
            raise ValueError("period must be positive")
        start = self._now if start_us is None else int(start_us)
        self._push(start, int(priority), _Periodic(name, int(period_us), fn, int(priority)))

    def run(self) -> None:
        self._finished.clear()
        self._handoff(self._advance())
        self._finished.wait()
        for th in self._threads:
            th.join()
        self._threads = [th for th in self._threads if th.is_alive()]
        if self._errors:
            raise self._errors[0]

    # -- scheduler internals ------------------------------------------------

    def _me(self) -> _Proc:
        proc = getattr(self._tls, "proc", None)
        if proc is None:
            raise RuntimeError("virtual clock waits must be issued from a spawned process")
        return proc

    def _push(self, t: int, priority: int, item: object) -> None:
        if isinstance(item, _Proc):
            self._queued_procs += 1
        heapq.heappush(self._heap, (t, priority, next(self._seq), item))

    def _release_blocked(self) -> None:
        if not self._blocked:
            return
        for proc in sorted(self._blocked, key=lambda p: p.priority):
            if self._stopped or proc.predicate():
                self._blocked.remove(proc)
                proc.predicate = None
                self._push(self._now, proc.priority, proc)

    def _advance(self) -> _Proc | None:
        """Fire due periodic callbacks; return the next process to resume."""
        while True:
            if self._alive <= 0:
                return None
            self._release_blocked()
            if not self._heap:
                if self._blocked:
                    self._fail(Deadlock(f"all processes blocked at t={self._now}us"))
                    continue
                return None
            if self._queued_procs == 0 and self._now - self._last_proc_time > self.max_idle_us:
                self._fail(Deadlock(f"no runnable process for {self.max_idle_us}us"))
                continue
            t, _, _, item = heapq.heappop(self._heap)
            if isinstance(item, _Periodic):
                if self._stopped:
                    continue
                self._now = t
                if self.trace is not None:
                    self.trace.append((t, item.name))
                try:
                    item.fn()
                except BaseException as exc:
                    self._fail(exc)
                    continue
                self._push(t + item.period, item.priority, item)
                continue
            self._queued_procs -= 1
            self._now = t
            self._last_proc_time = t
            if self.trace is not None:
                self.trace.append((t, item.name))
            return item

    def _fail(self, exc: BaseException) -> None:
        self._errors.append(exc)
        self._stopped = True

    def _handoff(self, nxt: _Proc | None) -> None:
        if nxt is None:
            self._finished.set()
        else:
            nxt.wake.set()

    def _switch(self, me: _Proc) -> None:
        nxt = self._advance()
        if nxt is not me:
            self._handoff(nxt)
            me.wake.wait()
            me.wake.clear()
        if self._stopped:
            raise ClockStopped


# ---------------------------------------------------------------------------
# Wall clock


class WallClock(Clock):
    """Real time on real threads.  The cost profile is carried but unused."""

    mode = ClockMode.WALL

    def __init__(self, costs: CostProfile | None = None) -> None:
        self.costs = costs or CostProfile()
        self._t0 = time.perf_counter_ns()
        self._stop_event = threading.Event()
        self._cond = threading.Condition()
        self._procs: list[threading.Thread] = []
        self._periodic: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        self._running = False

    def now(self) -> int:
        return (time.perf_counter_ns() - self._t0) // 1_000

    @property
    def stopped(self) -> bool:
        return self._stop_event.is_set()

    def stop(self) -> None:
        self._stop_event.set()
        self.notify()

    def wait_until(self, t: int) -> None:
        while True:
            if self._stop_event.is_set():
                raise ClockStopped
            remaining = t - self.now()
            if remaining <= 0:
                return
            self._stop_event.wait(remaining / US_PER_S)

    def charge(self, component: Component, actual_elapsed_us: int = 0) -> None:
        return None

    def wait_for(self, predicate: Callable[[], bool]) -> None:
        with self._cond:
            while not predicate():
                if self._stop_event.is_set():
                    raise ClockStopped
                self._cond.wait(0.05)

    def notify(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def _guarded(self, fn: Callable[[], None]) -> Callable[[], None]:
        def body() -> None:
            try:
                fn()
            except ClockStopped:
                pass
            except BaseException as exc:
                self._errors.append(exc)
                self.stop()

        return body

    def spawn(self, name: str, fn: Callable[[], None], priority: int) -> None:
        th = threading.Thread(target=self._guarded(fn), name=f"wall:{name}", daemon=True)
        self._procs.append(th)
        if self._running:
            th.start()

    def every(
        self,
        name: str,
        period_us: int,
        fn: Callable[[], None],
        priority: int,
        start_us: int | None = None,
    ) -> None:
        if period_us <= 0:
            raise ValueError("period must be positive")
        first = self.now() if start_us is None else int(start_us)

        def loop() -> None:
            t = first
            while True:
                self.wait_until(t)
                fn()
                t += period_us
                now = self.now()
                if now > t:
                    # missed ticks are dropped, the grid stays anchored at `first`
                    t += -(-(now - t) // period_us) * period_us

        th = threading.Thread(target=self._guarded(loop), name=f"wall:{name}", daemon=True)
        self._periodic.append(th)
        if self._running:
            th.start()

    def run(self) -> None:
        self._running = True
        for th in self._periodic + self._procs:
            if not th.is_alive() and th.ident is None:
                th.start()
        i = 0
        while i < len(self._procs):  # processes may spawn more processes
            self._procs[i].join()
            i += 1
        self.stop()
        for th in self._periodic:
            th.join()
        self._running = False
        if self._errors:
            raise self._errors[0]


def make_clock(mode: ClockMode | str, costs: CostProfile | None = None, **kwargs) -> Clock:
    mode = ClockMode(mode)
    if mode is ClockMode.VIRTUAL:
        return VirtualClock(costs, **kwargs)
    return WallClock(costs)
