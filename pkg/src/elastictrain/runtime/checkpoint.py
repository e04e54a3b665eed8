"""Job checkpoints: a versioned JSON container.

Floats are written with ``repr`` precision, so parameters round-trip
bit-exactly.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

FORMAT = "elastictrain-checkpoint"
FORMAT_VERSION = 1


class NoCheckpoint(Exception):
    pass


@dataclass
class JobCheckpoint:
    params: np.ndarray
    t: int
    epoch: int
    pipeline: dict
    B: int
    rng: dict = field(default_factory=dict)
    time: float = 0.0

    def to_dict(self) -> dict:
        return {"format": FORMAT, "version": FORMAT_VERSION,
                "params": [float(x) for x in self.params], "t": self.t,
                "epoch": self.epoch, "pipeline": self.pipeline, "B": self.B,
                "rng": self.rng, "time": self.time}

    @classmethod
    def from_dict(cls, d: dict) -> "JobCheckpoint":
        if d.get("format") != FORMAT or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"not a version-{FORMAT_VERSION} {FORMAT} file")
        return cls(np.array(d["params"], dtype=np.float64), int(d["t"]), int(d["epoch"]),
                   d["pipeline"], int(d["B"]), d.get("rng", {}), float(d.get("time", 0.0)))

    def save(self, path: str) -> None:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(self.to_dict(), f)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "JobCheckpoint":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class CheckpointStore:
    """Persistent storage shared by all workers of a job (optionally file-backed)."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._latest: Optional[dict] = None
        self.writes = 0

    def write(self, ckpt: JobCheckpoint) -> None:
        self._latest = ckpt.to_dict()
        self.writes += 1
        if self.path:
            ckpt.save(self.path)

    def latest(self) -> JobCheckpoint:
        if self._latest is None:
            if self.path and os.path.exists(self.path):
                return JobCheckpoint.load(self.path)
            raise NoCheckpoint("no checkpoint has been written")
        return JobCheckpoint.from_dict(self._latest)
