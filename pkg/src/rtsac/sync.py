"""Inter-process primitives: latest-wins slots and a single-slot handoff.

Both rely on CPython's atomic reference assignment; the slot publishes an
immutable tuple so readers always see a consistent snapshot without locks.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Generic, TypeVar

from rtsac.clock import Clock

T = TypeVar("T")


@dataclass(frozen=True)
class Timestamped(Generic[T]):
    t: int  # capture time, microseconds
    value: T


class LatestSlot(Generic[T]):
    """Single-writer cell where writes overwrite and reads return the freshest value.

    ``history`` > 1 additionally keeps the last few writes, which lets a
    reader that polls slower than the writer still see recent samples.
    """

    def __init__(self, history: int = 1, initial: T | None = None) -> None:
        if history < 1:
            raise ValueError("history must be >= 1")
        self.history = history
        self._items: tuple[T, ...] = () if initial is None else (initial,)
        self.writes = 0

    def write(self, value: T) -> None:
        items = self._items
        if len(items) >= self.history:
            items = items[len(items) - self.history + 1 :]
        self._items = items + (value,)
        self.writes += 1

    def read(self) -> T | None:
        items = self._items
        return items[-1] if items else None

    def recent(self) -> tuple[T, ...]:
        """All retained values, oldest first."""
        return self._items

    def clear(self) -> None:
        self._items = ()


class Handoff(Generic[T]):
    """Single-slot blocking handoff between one producer and one consumer.

    ``put`` blocks while the slot is full; ``take`` blocks while it is empty.
    Every item put is taken exactly once.
    """

    def __init__(self, clock: Clock) -> None:
        self._clock = clock
        self._item: T | None = None
        self._full = False
        self._lock = threading.Lock()
        self.puts = 0
        self.takes = 0

    @property
    def full(self) -> bool:
        return self._full

    def put(self, item: T) -> None:
        self._clock.wait_for(lambda: not self._full)
        with self._lock:
            self._item = item
            self._full = True
            self.puts += 1
        self._clock.notify()

    def take(self) -> T:
        self._clock.wait_for(lambda: self._full)
        with self._lock:
            item = self._item
            self._item = None
            self._full = False
            self.takes += 1
        self._clock.notify()
        return item  # type: ignore[return-value]
