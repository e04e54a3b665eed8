"""Job traces: synthetic generation and CSV round-tripping.

CSV columns are ``job_id,submit_time_s,requested_gpus,total_work_gpu_s,
curve_id,elastic``. Throughput curves live in a JSON sidecar next to the CSV
(``<name>.curves.json``) mapping curve_id to ``{p: S(p)}``.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .curves import ThroughputCurve, default_library

COLUMNS = ["job_id", "submit_time_s", "requested_gpus", "total_work_gpu_s", "curve_id", "elastic"]

# job size (GPU-seconds) is lognormal with the 20th percentile at 85 and the
# 90th at 58,330
_Z20, _Z90 = -0.8416212335729143, 1.2815515655446004
SIZE_SIGMA = (math.log(58330) - math.log(85)) / (_Z90 - _Z20)
SIZE_MU = math.log(85) - _Z20 * SIZE_SIGMA

GPU_CHOICES = (1, 2, 4, 8, 16)
GPU_WEIGHTS = (0.35, 0.2, 0.25, 0.15, 0.05)


class TraceInvalid(ValueError):
    pass


@dataclass
class JobSpec:
    job_id: str
    submit_time: float
    p: int  # requested parallelism
    total_work: float  # GPU-seconds at optimal efficiency
    curve_id: str
    elastic: bool = True

    def __post_init__(self):
        if not self.total_work > 0:
            raise TraceInvalid(f"job {self.job_id}: total_work must be positive")
        if self.p < 1:
            raise TraceInvalid(f"job {self.job_id}: requested parallelism must be >= 1")
        if self.submit_time < 0:
            raise TraceInvalid(f"job {self.job_id}: negative submit time")


@dataclass
class Trace:
    jobs: list
    curves: dict

    def __len__(self):
        return len(self.jobs)

    def curve(self, job: JobSpec) -> ThroughputCurve:
        return self.curves[job.curve_id]

    def validate(self) -> None:
        last = -math.inf
        seen = set()
        for j in self.jobs:
            if j.submit_time < last:
                raise TraceInvalid(f"job {j.job_id} is out of submit-time order")
            last = j.submit_time
            if j.job_id in seen:
                raise TraceInvalid(f"duplicate job id {j.job_id}")
            seen.add(j.job_id)
            c = self.curves.get(j.curve_id)
            if c is None:
                raise TraceInvalid(f"job {j.job_id}: unknown curve {j.curve_id!r}")
            if not c.supports(j.p):
                raise TraceInvalid(f"job {j.job_id}: curve {j.curve_id} has no point at p={j.p}")


def sample_sizes(rng: np.random.Generator, n: int, mu: float = SIZE_MU,
                 sigma: float = SIZE_SIGMA, cap: Optional[float] = None) -> np.ndarray:
    sizes = rng.lognormal(mu, sigma, size=n)
    if cap is not None:
        sizes = np.minimum(sizes, cap)
    return np.maximum(sizes, 1.0)


def generate_trace(seed: int, n_jobs: int, mean_interarrival: float = 60.0,
                   mu: float = SIZE_MU, sigma: float = SIZE_SIGMA,
                   size_cap: Optional[float] = None, gpu_choices: Sequence[int] = GPU_CHOICES,
                   gpu_weights: Sequence[float] = GPU_WEIGHTS, elastic_fraction: float = 1.0,
                   curves: Optional[dict] = None) -> Trace:
    """Poisson arrivals with heavy-tailed job sizes.

    Each job picks a curve uniformly from the library; requested parallelism
    is clipped to what the curve supports.
    """
    rng = np.random.default_rng(seed)
    curves = curves or default_library()
    names = sorted(curves)
    gaps = rng.exponential(mean_interarrival, size=n_jobs)
    submit = np.cumsum(gaps) - gaps[0] if n_jobs else gaps
    sizes = sample_sizes(rng, n_jobs, mu, sigma, size_cap)
    w = np.asarray(gpu_weights, dtype=float)
    gpus = rng.choice(np.asarray(gpu_choices), size=n_jobs, p=w / w.sum())
    cids = rng.integers(0, len(names), size=n_jobs)
    elastic = rng.random(n_jobs) < elastic_fraction
    jobs = []
    for i in range(n_jobs):
        c = names[int(cids[i])]
        p = int(min(int(gpus[i]), curves[c].max_p))
        jobs.append(JobSpec(f"j{i}", round(float(submit[i]), 3), p,
                            round(float(sizes[i]), 3), c, bool(elastic[i])))
    return Trace(jobs, dict(curves))


def ramp_trace(n_jobs: int = 16, every: float = 30.0, p: int = 4, work: float = 1e9,
               curve: Optional[ThroughputCurve] = None) -> Trace:
    """Identical jobs submitted at a fixed interval."""
    curve = curve or default_library()["resnet50"]
    jobs = [JobSpec(f"j{i}", i * every, p, work, curve.name or "c0") for i in range(n_jobs)]
    return Trace(jobs, {curve.name or "c0": curve})


def sidecar_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".curves.json"


def write_trace(trace: Trace, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        for j in trace.jobs:
            w.writerow([j.job_id, repr(j.submit_time), j.p, repr(j.total_work), j.curve_id,
                        int(j.elastic)])
    with open(sidecar_path(path), "w") as f:
        json.dump({k: c.to_dict() for k, c in sorted(trace.curves.items())}, f, indent=1,
                  sort_keys=True)


def _parse_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def read_trace(path: str, curves_path: Optional[str] = None) -> Trace:
    curves_path = curves_path or sidecar_path(path)
    try:
        with open(curves_path) as f:
            raw = json.load(f)
        curves = {k: ThroughputCurve.from_dict(v, k) for k, v in raw.items()}
    except (OSError, ValueError) as e:
        raise TraceInvalid(f"cannot load curve library {curves_path}: {e}") from e
    jobs = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != COLUMNS:
            raise TraceInvalid(f"{path}: expected header {','.join(COLUMNS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                jobs.append(JobSpec(row["job_id"], float(row["submit_time_s"]),
                                    int(row["requested_gpus"]), float(row["total_work_gpu_s"]),
                                    row["curve_id"], _parse_bool(row["elastic"])))
            except (TypeError, ValueError, KeyError) as e:
                raise TraceInvalid(f"{path}:{lineno}: {e}") from e
    trace = Trace(jobs, curves)
    trace.validate()
    return trace
