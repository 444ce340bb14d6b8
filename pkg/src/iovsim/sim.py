"""Single-threaded discrete-event loop driven by a simulated nanosecond clock."""
from __future__ import annotations

import heapq
from typing import Callable


class EventLoop:
    """Min-heap of (time, seq) ordered callbacks.

    Events scheduled for the same instant run in scheduling order, which
    keeps every run deterministic.
    """

    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self.events_run = 0

    def at(self, when: float, fn: Callable, *args) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (when, self._seq, fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def call_soon(self, fn: Callable, *args) -> None:
        self.at(self.now, fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: float | None = None, stop: Callable[[], bool] | None = None) -> float:
        q = self._queue
        pop = heapq.heappop
        while q:
            if until is not None and q[0][0] > until:
                self.now = until
                break
            when, _, fn, args = pop(q)
            self.now = when
            fn(*args)
            self.events_run += 1
            if stop is not None and stop():
                break
        return self.now
