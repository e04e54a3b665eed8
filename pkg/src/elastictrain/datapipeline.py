"""Leader-owned dynamic data assignment.

The dataset is split at the meta-data level into ``d`` contiguous partitions.
Each epoch the leader draws a fresh permutation of partition indexes and
hands partitions out on demand. Workers report the offset reached in every
partition they touched at the end of each mini-batch; when a worker leaves,
its unfinished partitions are reclaimed at the last reported offset and
served to the next requester before any fresh partition. Together this
consumes every sample exactly once per epoch regardless of scaling.
"""
from __future__ import annotations

import json
import os
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np


class UnknownWorker(KeyError):
    pass


class StaleShard(Exception):
    """The reported partition is not currently assigned to this worker."""


class ShapeMismatch(ValueError):
    pass


def default_num_partitions(max_workers: int) -> int:
    return max(4 * max_workers, 64)


@dataclass(frozen=True)
class PartitionMeta:
    index: int
    locator: str
    offset: int
    length: int

    def sample_ids(self, start: int = 0, stop: Optional[int] = None) -> range:
        stop = self.length if stop is None else stop
        return range(self.offset + start, self.offset + stop)


def make_partitions(total: int, d: int, locator: str = "synthetic") -> list[PartitionMeta]:
    """Tile ``total`` samples into ``d`` contiguous partitions."""
    if not 1 <= d <= total:
        raise ValueError(f"need 1 <= d <= total, got d={d}, total={total}")
    bounds = [p * total // d for p in range(d + 1)]
    return [PartitionMeta(p, locator, bounds[p], bounds[p + 1] - bounds[p]) for p in range(d)]


@dataclass(frozen=True)
class Shard:
    meta: PartitionMeta
    resume_offset: int = 0


@dataclass(frozen=True)
class EpochEnd:
    epoch: int


@dataclass(frozen=True)
class Drained:
    """Nothing left to hand out, but other workers still hold unfinished shards."""
    epoch: int


@dataclass(frozen=True)
class ProgressRecord:
    worker: str
    partition: int
    next_sample_offset: int


@dataclass
class EpochPlan:
    epoch: int
    perm: list
    cursor: int = 0
    reclaimed: list = field(default_factory=list)  # [(partition index, resume_offset)]


def epoch_permutation(seed: int, epoch: int, d: int) -> list[int]:
    return np.random.default_rng([seed, epoch]).permutation(d).tolist()


class DataPipeline:
    """Partition permutation, on-demand handout, and progress tracking.

    ``auto_advance`` makes :meth:`next_shard` open the next epoch on the call
    after it returned :class:`EpochEnd`. The runtime turns it off and opens
    epochs itself at mini-batch boundaries so that no mini-batch mixes two
    epochs.
    """

    def __init__(self, partitions: Sequence[PartitionMeta], seed: int = 0,
                 perm: Optional[Sequence[int]] = None, auto_advance: bool = True):
        self.partitions = list(partitions)
        self.d = len(self.partitions)
        self.total = sum(p.length for p in self.partitions)
        self.seed = seed
        self.auto_advance = auto_advance
        self.workers: set = set()
        # partition index -> (worker, next offset), in handout order
        self.assignments: "OrderedDict[int, list]" = OrderedDict()
        self.plan = EpochPlan(0, list(perm) if perm is not None else
                              epoch_permutation(seed, 0, self.d))
        self._check_perm(self.plan.perm)
        self._ended = False

    def _check_perm(self, perm):
        if sorted(perm) != list(range(self.d)):
            raise ValueError("permutation must contain every partition index exactly once")

    @property
    def epoch(self) -> int:
        return self.plan.epoch

    # -- membership ---------------------------------------------------------

    def register(self, worker: str) -> None:
        self.workers.add(worker)

    def unregister(self, worker: str) -> None:
        self.reclaim(worker)
        self.workers.discard(worker)

    def _require(self, worker: str) -> None:
        if worker not in self.workers:
            raise UnknownWorker(worker)

    # -- handout ------------------------------------------------------------

    def epoch_complete(self) -> bool:
        return (self.plan.cursor >= self.d and not self.plan.reclaimed
                and not self.assignments)

    def begin_epoch(self, perm: Optional[Sequence[int]] = None) -> None:
        if not self.epoch_complete():
            raise RuntimeError("current epoch still has unconsumed data")
        e = self.plan.epoch + 1
        perm = list(perm) if perm is not None else epoch_permutation(self.seed, e, self.d)
        self._check_perm(perm)
        self.plan = EpochPlan(e, perm)
        self._ended = False

    def next_shard(self, worker: str) -> Union[Shard, EpochEnd, Drained]:
        self._require(worker)
        if self._ended and self.auto_advance:
            self.begin_epoch()
        plan = self.plan
        if plan.reclaimed:
            idx, off = plan.reclaimed.pop(0)
            return self._assign(worker, idx, off)
        if plan.cursor < self.d:
            idx = plan.perm[plan.cursor]
            plan.cursor += 1
            return self._assign(worker, idx, 0)
        if not self.assignments:
            self._ended = True
            return EpochEnd(plan.epoch)
        return Drained(plan.epoch)

    def _assign(self, worker: str, idx: int, off: int) -> Shard:
        self.assignments[idx] = [worker, off]
        return Shard(self.partitions[idx], off)

    def shard_generator(self, worker: str) -> Iterator[Shard]:
        """Yield shards for ``worker`` until the current epoch has nothing left."""
        while True:
            got = self.next_shard(worker)
            if not isinstance(got, Shard):
                return
            yield got

    # -- progress -----------------------------------------------------------

    def report_progress(self, worker: str, record: ProgressRecord) -> None:
        self._require(worker)
        a = self.assignments.get(record.partition)
        if a is None or a[0] != worker:
            raise StaleShard(f"partition {record.partition} is not held by {worker}")
        length = self.partitions[record.partition].length
        if not a[1] <= record.next_sample_offset <= length:
            raise ValueError(f"offset {record.next_sample_offset} outside [{a[1]}, {length}]")
        a[1] = record.next_sample_offset
        if a[1] == length:
            del self.assignments[record.partition]

    def progress(self) -> list[ProgressRecord]:
        return [ProgressRecord(w, idx, off) for idx, (w, off) in self.assignments.items()]

    def held_by(self, worker: str) -> list[tuple[int, int]]:
        return [(idx, off) for idx, (w, off) in self.assignments.items() if w == worker]

    def reclaim(self, worker: str) -> None:
        for idx, off in self.held_by(worker):
            del self.assignments[idx]
            if off < self.partitions[idx].length:
                self.plan.reclaimed.append((idx, off))

    # -- checkpointing ------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "d": self.d,
            "total": self.total,
            "seed": self.seed,
            "epoch": self.plan.epoch,
            "perm": list(self.plan.perm),
            "cursor": self.plan.cursor,
            "reclaimed": [list(r) for r in self.plan.reclaimed],
            "progress": [asdict(r) for r in self.progress()],
            "ended": self._ended,
        }

    def restore(self, ckpt: dict, keep_assignments: bool = False) -> None:
        """Load a snapshot.

        Unless ``keep_assignments`` is set, shards that were in flight are
        queued for reclamation at their recorded offsets, which is what a
        restart needs since no worker holds them any more.
        """
        if ckpt["d"] != self.d or ckpt["total"] != self.total:
            raise ShapeMismatch(f"checkpoint has d={ckpt['d']}, total={ckpt['total']}; "
                                f"pipeline has d={self.d}, total={self.total}")
        self._check_perm(ckpt["perm"])
        self.seed = ckpt.get("seed", self.seed)
        self.plan = EpochPlan(ckpt["epoch"], list(ckpt["perm"]), ckpt["cursor"],
                              [tuple(r) for r in ckpt["reclaimed"]])
        self._ended = ckpt.get("ended", False)
        self.assignments = OrderedDict()
        for r in ckpt["progress"]:
            if keep_assignments:
                self.assignments[r["partition"]] = [r["worker"], r["next_sample_offset"]]
                self.workers.add(r["worker"])
            elif r["next_sample_offset"] < self.partitions[r["partition"]].length:
                self.plan.reclaimed.append((r["partition"], r["next_sample_offset"]))


# ---------------------------------------------------------------------------
# worker-side prefetch


class PrefetchBuffer:
    """Two-slot ping-pong buffer of shards on a worker.

    :meth:`take` reads samples sequentially across buffered shards. A refill
    is due whenever fewer than two shards are buffered and the epoch has not
    run dry for this worker.
    """

    slots = 2

    def __init__(self):
        self._shards: deque = deque()  # [PartitionMeta, position]
        self.dry = False
        self.requested = 0

    def __len__(self) -> int:
        return len(self._shards)

    def needs_fill(self) -> bool:
        return not self.dry and len(self._shards) + self.requested < self.slots

    def fill(self, shard: Shard) -> None:
        self._shards.append([shard.meta, shard.resume_offset])

    def take(self, n: int) -> tuple[list[int], list[ProgressRecord], bool]:
        """Read up to ``n`` sample ids.

        Returns (ids, progress records for touched partitions, starved) where
        ``starved`` means fewer than ``n`` ids were available now.
        """
        ids: list[int] = []
        touched: dict[int, int] = {}
        while len(ids) < n and self._shards:
            meta, pos = self._shards[0]
            k = min(n - len(ids), meta.length - pos)
            ids.extend(meta.sample_ids(pos, pos + k))
            pos += k
            touched[meta.index] = pos
            if pos == meta.length:
                self._shards.popleft()
            else:
                self._shards[0][1] = pos
        return ids, [ProgressRecord("", i, off) for i, off in touched.items()], len(ids) < n

    def state(self) -> list[tuple[int, int]]:
        return [(m.index, pos) for m, pos in self._shards]

    def restore(self, state: Sequence[tuple[int, int]], partitions: Sequence[PartitionMeta]) -> None:
        self._shards = deque([partitions[i], pos] for i, pos in state)
        self.requested = 0

    def clear(self) -> None:
        self._shards.clear()
        self.requested = 0
        self.dry = False


# ---------------------------------------------------------------------------
# datasets


class SyntheticDataset:
    """Deterministic regression/classification samples addressed by id."""

    def __init__(self, n_samples: int, n_features: int, seed: int = 0,
                 task: str = "least_squares", noise: float = 0.01):
        if task not in ("least_squares", "logistic"):
            raise ValueError(f"unknown task {task!r}")
        rng = np.random.default_rng(seed)
        self.n_samples = n_samples
        self.n_features = n_features
        self.task = task
        self.X = rng.standard_normal((n_samples, n_features))
        self.w_true = rng.standard_normal(n_features)
        z = self.X @ self.w_true
        if task == "least_squares":
            self.y = z + noise * rng.standard_normal(n_samples)
        else:
            self.y = (rng.random(n_samples) < 1.0 / (1.0 + np.exp(-z))).astype(np.float64)
        self.locator = f"synthetic:{seed}"

    def __len__(self) -> int:
        return self.n_samples

    def samples(self, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(ids, dtype=np.int64)
        return self.X[idx], self.y[idx]


class ArrayDataset(SyntheticDataset):
    """Wraps in-memory arrays."""

    def __init__(self, X, y, locator: str = "array"):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("X must be 2-D with one label per row")
        self.n_samples, self.n_features = self.X.shape
        self.locator = locator


class FileDataset(ArrayDataset):
    """Fixed-size float64 records (features then label) listed by a JSON manifest.

    Manifest fields: ``record_files`` (paths relative to the manifest),
    ``record_size`` (bytes per record), ``total`` (record count),
    ``n_features``.
    """

    def __init__(self, manifest_path: str):
        with open(manifest_path) as f:
            man = json.load(f)
        n_features = int(man["n_features"])
        record_size = int(man["record_size"])
        if record_size != 8 * (n_features + 1):
            raise ValueError(f"record_size {record_size} does not match {n_features} features")
        base = os.path.dirname(os.path.abspath(manifest_path))
        parts = [np.fromfile(os.path.join(base, p), dtype="<f8").reshape(-1, n_features + 1)
                 for p in man["record_files"]]
        data = np.concatenate(parts) if parts else np.empty((0, n_features + 1))
        if len(data) != int(man["total"]):
            raise ValueError(f"manifest says {man['total']} records, files hold {len(data)}")
        super().__init__(data[:, :-1], data[:, -1], locator=f"file:{manifest_path}")


def write_file_dataset(directory: str, X, y, records_per_file: int = 1024) -> str:
    """Write ``X, y`` as record files plus a manifest; returns the manifest path."""
    X = np.asarray(X, dtype="<f8")
    y = np.asarray(y, dtype="<f8")
    os.makedirs(directory, exist_ok=True)
    rows = np.column_stack([X, y])
    files = []
    for k, start in enumerate(range(0, len(rows), records_per_file)):
        name = f"records-{k:05d}.bin"
        rows[start:start + records_per_file].tofile(os.path.join(directory, name))
        files.append(name)
    manifest = {"record_files": files, "record_size": 8 * (X.shape[1] + 1),
                "total": len(rows), "n_features": X.shape[1]}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path
