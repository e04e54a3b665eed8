"""Embeddable lease-based key-value coordination store.

Provides the compare-and-swap leader election, lease refresh, voluntary
erase, and expiry notification that an elastic job needs from an external
coordination service. State is kept in-process and all mutations go through
a single lock, so the store is safe to share between threads.
"""
from __future__ import annotations

import collections
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from .clock import MonotonicClock

logger = logging.getLogger(__name__)

DEFAULT_TTL = 3.0


class NotLeader(Exception):
    """The caller's address does not match the current leader record."""


@dataclass(frozen=True)
class Won:
    generation: int


@dataclass(frozen=True)
class Lost:
    address: str


@dataclass(frozen=True)
class Elected:
    address: str
    generation: int


@dataclass(frozen=True)
class Expired:
    generation: int
    erased: bool = False


WatchEvent = Union[Elected, Expired]


@dataclass
class LeaderRecord:
    job_handle: str
    address: str
    lease_deadline: float
    generation: int
    ttl: float
    last_refresh: float

    def expired(self, now: float) -> bool:
        return now > self.last_refresh + self.ttl


class Watch:
    """A subscription to one key's leadership events.

    Events can be consumed by polling (:meth:`drain`), blocking (:meth:`get`),
    or through a callback given at subscription time.
    """

    def __init__(self, store: "LeaseStore", job_handle: str,
                 callback: Optional[Callable[[WatchEvent], Any]] = None):
        self._store = store
        self.job_handle = job_handle
        self._callback = callback
        self._events: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.closed = False

    def _push(self, event: WatchEvent) -> None:
        if self.closed:
            return
        if self._callback is not None:
            self._callback(event)
            return
        with self._cond:
            self._events.append(event)
            self._cond.notify_all()

    def drain(self) -> list:
        with self._cond:
            out = list(self._events)
            self._events.clear()
        return out

    def get(self, timeout: Optional[float] = None) -> Optional[WatchEvent]:
        with self._cond:
            if not self._events:
                self._cond.wait(timeout)
            return self._events.popleft() if self._events else None

    def close(self) -> None:
        self.closed = True
        self._store._unwatch(self)


class LeaseStore:
    """In-process lease KV with CAS-on-expiry semantics.

    ``ttl`` defaults to 3s; refresh should happen every ``ttl/3`` and expiry is
    polled every ``poll_interval`` (``ttl/10`` by default). With a simulated
    clock the owner calls :meth:`poll_expiry` itself; with a real clock
    :meth:`start_poller` runs it on a daemon thread.
    """

    def __init__(self, clock=None, ttl: float = DEFAULT_TTL,
                 poll_interval: Optional[float] = None):
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        self.clock = clock or MonotonicClock()
        self.ttl = ttl
        self.poll_interval = poll_interval if poll_interval is not None else ttl / 10
        self._lock = threading.RLock()
        self._records: dict[str, LeaderRecord] = {}
        self._generations: dict[str, int] = collections.defaultdict(int)
        self._notified_expired: set = set()
        self._watches: dict[str, list[Watch]] = collections.defaultdict(list)
        self._kv: dict[str, Any] = {}
        self._poller: Optional[threading.Thread] = None
        self._stop = threading.Event()

    @property
    def refresh_period(self) -> float:
        return self.ttl / 3

    # -- leadership -------------------------------------------------------

    def cas_put_if_absent_or_expired(self, job_handle: str, address: str,
                                     ttl: Optional[float] = None) -> Union[Won, Lost]:
        ttl = self.ttl if ttl is None else ttl
        with self._lock:
            now = self.clock.now()
            rec = self._records.get(job_handle)
            if rec is not None and not rec.expired(now):
                return Lost(rec.address)
            if rec is not None:
                self._expire_locked(job_handle, rec, erased=False)
            gen = self._generations[job_handle] + 1
            self._generations[job_handle] = gen
            self._records[job_handle] = LeaderRecord(
                job_handle, address, now + ttl, gen, ttl, now)
            self._notified_expired.discard((job_handle, gen))
            self._notify(job_handle, Elected(address, gen))
            return Won(gen)

    def refresh(self, job_handle: str, address: str) -> None:
        with self._lock:
            now = self.clock.now()
            rec = self._records.get(job_handle)
            if rec is None or rec.address != address or rec.expired(now):
                raise NotLeader(job_handle)
            rec.last_refresh = now
            rec.lease_deadline = now + rec.ttl

    def erase(self, job_handle: str, address: str) -> None:
        with self._lock:
            rec = self._records.get(job_handle)
            if rec is None or rec.address != address:
                raise NotLeader(job_handle)
            self._expire_locked(job_handle, rec, erased=True)

    def leader(self, job_handle: str) -> Optional[LeaderRecord]:
        """The current unexpired record, if any."""
        with self._lock:
            rec = self._records.get(job_handle)
            if rec is None or rec.expired(self.clock.now()):
                return None
            return LeaderRecord(**vars(rec))

    def valid_records(self, job_handle: str) -> int:
        return 0 if self.leader(job_handle) is None else 1

    # -- plain KV (job meta-data mirror) ----------------------------------

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            self._kv[key] = value

    def get(self, key: str, default: Any = None) -> Any:
        with self._lock:
            return self._kv.get(key, default)

    # -- notification -----------------------------------------------------

    def watch(self, job_handle: str,
              callback: Optional[Callable[[WatchEvent], Any]] = None) -> Watch:
        w = Watch(self, job_handle, callback)
        with self._lock:
            self._watches[job_handle].append(w)
        return w

    def _unwatch(self, w: Watch) -> None:
        with self._lock:
            if w in self._watches[w.job_handle]:
                self._watches[w.job_handle].remove(w)

    def _notify(self, job_handle: str, event: WatchEvent) -> None:
        for w in list(self._watches.get(job_handle, ())):
            w._push(event)

    def _expire_locked(self, job_handle: str, rec: LeaderRecord, erased: bool) -> None:
        del self._records[job_handle]
        key = (job_handle, rec.generation)
        if key not in self._notified_expired:
            self._notified_expired.add(key)
            self._notify(job_handle, Expired(rec.generation, erased))

    def poll_expiry(self) -> int:
        """Remove expired records and notify watchers. Returns the count expired."""
        n = 0
        with self._lock:
            now = self.clock.now()
            for job_handle, rec in list(self._records.items()):
                if rec.expired(now):
                    self._expire_locked(job_handle, rec, erased=False)
                    n += 1
        return n

    def start_poller(self) -> None:
        if self._poller is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(self.poll_interval):
                self.poll_expiry()

        self._poller = threading.Thread(target=loop, name="lease-poller", daemon=True)
        self._poller.start()

    def stop_poller(self) -> None:
        self._stop.set()
        if self._poller is not None:
            self._poller.join()
            self._poller = None
