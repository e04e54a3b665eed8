"""Clocks and a small deterministic discrete-event loop.

Everything time-dependent in the package takes a clock so that tests can
run on simulated time and be replayed exactly.
"""
from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Any, Callable, Optional


class MonotonicClock:
    def now(self) -> float:
        return time.monotonic()


class SimClock:
    """Manually advanced clock. Time never goes backwards."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("cannot advance a clock backwards")
        with self._lock:
            self._now += dt
            return self._now

    def set(self, t: float) -> None:
        with self._lock:
            if t < self._now:
                raise ValueError(f"cannot rewind clock from {self._now} to {t}")
            self._now = float(t)


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: float, fn: Callable[..., Any], args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Single-threaded event loop over a :class:`SimClock`.

    Callbacks scheduled for the same instant run in scheduling order, which
    makes every run a pure function of its inputs.
    """

    def __init__(self, start: float = 0.0):
        self.clock = SimClock(start)
        self._queue: list = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return self.clock.now()

    def call_at(self, when: float, fn: Callable[..., Any], *args: Any) -> Timer:
        when = max(when, self.now)
        timer = Timer(when, fn, args)
        heapq.heappush(self._queue, (when, next(self._seq), timer))
        return timer

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any) -> Timer:
        return self.call_at(self.now + delay, fn, *args)

    def call_soon(self, fn: Callable[..., Any], *args: Any) -> Timer:
        return self.call_at(self.now, fn, *args)

    def pending(self) -> int:
        return sum(1 for _, _, t in self._queue if not t.cancelled)

    def step(self) -> bool:
        while self._queue:
            when, _, timer = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.clock.set(when)
            timer.fn(*timer.args)
            return True
        return False

    def run_until(self, t: Optional[float] = None,
                  stop: Optional[Callable[[], bool]] = None,
                  max_steps: Optional[int] = None) -> None:
        """Run callbacks until time ``t``, ``stop()`` is true, or the queue drains."""
        steps = 0
        while self._queue:
            if stop is not None and stop():
                return
            when = self._queue[0][0]
            if t is not None and when > t:
                break
            self.step()
            steps += 1
            if max_steps is not None and steps >= max_steps:
                raise RuntimeError(f"event loop exceeded {max_steps} steps")
        if t is not None and (stop is None or not stop()):
            self.clock.set(max(t, self.now))
