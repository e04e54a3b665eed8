"""Leader-coordinated ring allreduce over a versioned topology.

Chunk ``c`` of a length-``L`` vector on ``N`` ranks covers elements
``[c*L//N, (c+1)*L//N)``. During reduce-scatter, rank ``r`` sends chunk
``(r - s) mod N`` to its successor at step ``s``; the receiver adds the
incoming partial to its own copy. Chunk ``c`` is therefore accumulated in
the fixed rank order ``c, c+1, ..., c+N-1 (mod N)`` and ends fully reduced
on rank ``c-1``. The allgather phase then circulates the reduced chunks
unchanged, so every rank returns identical bytes.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .transport import PeerGone

SUM = "sum"
AVERAGE = "average"


class VersionMismatch(Exception):
    """A participant holds a different topology version."""


class StallTimeout(Exception):
    """Some workers did not announce a tensor within the liveness window."""

    def __init__(self, missing: Iterable[str], tensor: Optional[str] = None):
        self.missing = sorted(missing)
        self.tensor = tensor
        super().__init__(f"workers {self.missing} did not announce {tensor!r}")


@dataclass(frozen=True)
class Topology:
    version: int
    ring: tuple

    def __post_init__(self):
        if len(set(self.ring)) != len(self.ring):
            raise ValueError(f"duplicate worker in ring {self.ring}")
        object.__setattr__(self, "ring", tuple(self.ring))

    def __len__(self) -> int:
        return len(self.ring)

    def __contains__(self, worker) -> bool:
        return worker in self.ring

    def rank(self, worker: str) -> int:
        return self.ring.index(worker)

    def successor(self, worker: str) -> str:
        return self.ring[(self.rank(worker) + 1) % len(self.ring)]

    def predecessor(self, worker: str) -> str:
        return self.ring[(self.rank(worker) - 1) % len(self.ring)]

    def neighbors(self) -> dict:
        return {w: (self.predecessor(w), self.successor(w)) for w in self.ring}

    def next(self, ring: Sequence[str]) -> "Topology":
        return Topology(self.version + 1, tuple(ring))

    def to_dict(self) -> dict:
        return {"version": self.version, "ring": list(self.ring)}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(int(d["version"]), tuple(d["ring"]))


@dataclass(frozen=True)
class TensorId:
    name: str
    len: int


def chunk_bounds(length: int, n: int) -> list[tuple[int, int]]:
    return [(c * length // n, (c + 1) * length // n) for c in range(n)]


def _check_op(op: str) -> None:
    if op not in (SUM, AVERAGE):
        raise ValueError(f"unknown reduction {op!r}")


def allreduce_group(inputs: Sequence[np.ndarray], topo: Topology, op: str = SUM,
                    versions: Optional[Sequence[int]] = None,
                    dead: Iterable[int] = ()) -> tuple[list[np.ndarray], list[int]]:
    """Run one ring collective for all ranks in lockstep.

    ``inputs[r]`` is rank ``r``'s local vector. Returns the per-rank results
    and the number of neighbour transfers each rank sent. ``dead`` ranks
    make their neighbours fail with :class:`PeerGone`.
    """
    _check_op(op)
    n = len(topo)
    if len(inputs) != n:
        raise ValueError(f"{len(inputs)} inputs for a ring of {n}")
    if versions is not None and any(v != topo.version for v in versions):
        raise VersionMismatch(f"versions {list(versions)} vs topology {topo.version}")
    dead = set(dead)
    if dead:
        raise PeerGone(",".join(topo.ring[r] for r in sorted(dead)))
    length = len(inputs[0])
    if any(len(x) != length for x in inputs):
        raise ValueError("all participants must contribute equal-length vectors")
    bufs = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    sent = [0] * n
    if n == 1:
        return bufs, sent
    bounds = chunk_bounds(length, n)
    for s in range(n - 1):
        # all sends of a step use pre-step values
        msgs = []
        for r in range(n):
            lo, hi = bounds[(r - s) % n]
            msgs.append(((r + 1) % n, (r - s) % n, bufs[r][lo:hi].copy()))
            sent[r] += 1
        for dst, c, data in msgs:
            lo, hi = bounds[c]
            bufs[dst][lo:hi] = data + bufs[dst][lo:hi]
    if op == AVERAGE:
        for r in range(n):
            lo, hi = bounds[(r + 1) % n]
            bufs[r][lo:hi] = bufs[r][lo:hi] / n
    for s in range(n - 1):
        msgs = []
        for r in range(n):
            c = (r + 1 - s) % n
            lo, hi = bounds[c]
            msgs.append(((r + 1) % n, c, bufs[r][lo:hi].copy()))
            sent[r] += 1
        for dst, c, data in msgs:
            lo, hi = bounds[c]
            bufs[dst][lo:hi] = data
    return bufs, sent


class RingComm:
    """Point-to-point channel used by :func:`ring_allreduce` on one rank."""

    def send(self, dst: int, tag: tuple, version: int, data: np.ndarray) -> None:
        raise NotImplementedError

    def recv(self, src: int, tag: tuple) -> tuple[int, np.ndarray]:
        raise NotImplementedError


def ring_allreduce(local: np.ndarray, topo: Topology, op: str = SUM, *,
                   comm: RingComm, rank: int, version: Optional[int] = None) -> np.ndarray:
    """One rank's side of the ring collective.

    Performs ``N-1`` reduce-scatter steps then ``N-1`` allgather steps, each
    moving one chunk to the ring successor. ``version`` is the caller's view
    of the topology version; a neighbour with a different view raises
    :class:`VersionMismatch`.
    """
    _check_op(op)
    version = topo.version if version is None else version
    if version != topo.version:
        raise VersionMismatch(f"local version {version} vs topology {topo.version}")
    n = len(topo)
    buf = np.array(local, dtype=np.float64, copy=True)
    if n == 1:
        return buf
    bounds = chunk_bounds(len(buf), n)
    succ, pred = (rank + 1) % n, (rank - 1) % n
    for s in range(n - 1):
        lo, hi = bounds[(rank - s) % n]
        comm.send(succ, ("rs", s), version, buf[lo:hi].copy())
        v, data = comm.recv(pred, ("rs", s))
        if v != version:
            raise VersionMismatch(f"rank {pred} at version {v}, rank {rank} at {version}")
        lo, hi = bounds[(pred - s) % n]
        buf[lo:hi] = data + buf[lo:hi]
    if op == AVERAGE:
        lo, hi = bounds[(rank + 1) % n]
        buf[lo:hi] = buf[lo:hi] / n
    for s in range(n - 1):
        lo, hi = bounds[(rank + 1 - s) % n]
        comm.send(succ, ("ag", s), version, buf[lo:hi].copy())
        v, data = comm.recv(pred, ("ag", s))
        if v != version:
            raise VersionMismatch(f"rank {pred} at version {v}, rank {rank} at {version}")
        lo, hi = bounds[(pred + 1 - s) % n]
        buf[lo:hi] = data
    return buf


class QueueComm(RingComm):
    """Thread-safe in-memory ring links; one instance per rank."""

    def __init__(self, links: dict, rank: int, timeout: float = 10.0):
        self._links = links
        self.rank = rank
        self.timeout = timeout
        self.sent = 0

    def send(self, dst, tag, version, data):
        self._links[(self.rank, dst)].put((tag, version, data))
        self.sent += 1

    def recv(self, src, tag):
        try:
            got, version, data = self._links[(src, self.rank)].get(timeout=self.timeout)
        except queue.Empty:
            raise PeerGone(f"rank {src}") from None
        if got != tag:
            raise RuntimeError(f"out-of-order ring message {got} != {tag}")
        return version, data


def run_threaded(inputs: Sequence[np.ndarray], topo: Topology, op: str = SUM,
                 versions: Optional[Sequence[int]] = None,
                 timeout: float = 10.0) -> tuple[list, list[int]]:
    """Run :func:`ring_allreduce` with one thread per rank.

    Returns (per-rank results or exceptions, per-rank send counts).
    """
    n = len(topo)
    links = {(r, (r + 1) % n): queue.Queue() for r in range(n)}
    comms = [QueueComm(links, r, timeout) for r in range(n)]
    results: list = [None] * n

    def work(r):
        try:
            v = None if versions is None else versions[r]
            results[r] = ring_allreduce(inputs[r], topo, op, comm=comms[r], rank=r, version=v)
        except Exception as e:  # surfaced to the caller per rank
            results[r] = e

    threads = [threading.Thread(target=work, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results, [c.sent for c in comms]


def canonical_sum(inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum in the ring's per-chunk accumulation order."""
    n = len(inputs)
    length = len(inputs[0])
    out = np.empty(length, dtype=np.float64)
    for c, (lo, hi) in enumerate(chunk_bounds(length, n)):
        acc = np.array(inputs[c % n][lo:hi], dtype=np.float64)
        for k in range(1, n):
            acc = acc + np.asarray(inputs[(c + k) % n][lo:hi], dtype=np.float64)
        out[lo:hi] = acc
    return out


# ---------------------------------------------------------------------------
# leader-side announcement tracking


def coordinate_round(workers: Iterable[str], pending: Iterable[tuple]) -> list[TensorId]:
    """Tensors announced by every worker, in a leader-chosen (name) order."""
    workers = set(workers)
    seen: dict[str, set] = {}
    lens: dict[str, int] = {}
    for w, t in pending:
        if lens.setdefault(t.name, t.len) != t.len:
            raise ValueError(f"inconsistent length for tensor {t.name}")
        seen.setdefault(t.name, set()).add(w)
    return [TensorId(name, lens[name]) for name in sorted(seen) if seen[name] >= workers]


class RoundCoordinator:
    """Tracks TensorReady announcements for one mini-batch.

    A tensor is released once all workers announced it; release order is the
    order in which tensors became complete. Announcements double as liveness
    evidence: :meth:`check` raises :class:`StallTimeout` when a tensor stays
    incomplete for longer than ``liveness_window`` after its first
    announcement.
    """

    def __init__(self, workers: Iterable[str], liveness_window: float):
        self.workers = frozenset(workers)
        self.liveness_window = liveness_window
        self._announced: dict[str, set] = {}
        self._lens: dict[str, int] = {}
        self._first_seen: dict[str, float] = {}
        self.released: list[TensorId] = []
        self.last_heard: dict[str, float] = {}

    def announce(self, worker: str, tensor: TensorId, now: float) -> list[TensorId]:
        if worker not in self.workers:
            raise KeyError(f"{worker} is not part of this round")
        if self._lens.setdefault(tensor.name, tensor.len) != tensor.len:
            raise ValueError(f"inconsistent length for tensor {tensor.name}")
        self.last_heard[worker] = now
        got = self._announced.setdefault(tensor.name, set())
        self._first_seen.setdefault(tensor.name, now)
        if worker in got:
            return []
        got.add(worker)
        if got == self.workers:
            t = TensorId(tensor.name, self._lens[tensor.name])
            self.released.append(t)
            return [t]
        return []

    def incomplete(self) -> dict[str, set]:
        return {name: self.workers - got for name, got in self._announced.items()
                if got != self.workers}

    def deadline(self) -> Optional[float]:
        pending = [self._first_seen[n] for n in self.incomplete()]
        return min(pending) + self.liveness_window if pending else None

    def check(self, now: float) -> None:
        for name, missing in sorted(self.incomplete().items()):
            if now >= self._first_seen[name] + self.liveness_window:
                raise StallTimeout(missing, name)
