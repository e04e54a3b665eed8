"""Event-driven simulation of a multi-tenant GPU cluster.

Jobs progress at ``S(p)/t(p*)`` GPU-seconds of optimal work per second, so a
job with ``total_work`` W run at its best per-GPU throughput on p GPUs
finishes after ``W/p`` seconds. Parallelism changes are charged per the
:class:`~elastictrain.scheduler.overhead.OverheadModel`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .overhead import EDL, OverheadModel
from .trace import JobSpec, Trace, TraceInvalid

_EPS = 1e-9


def machines_needed(p: int, m: int) -> int:
    return max(1, math.ceil(p / m))


class SimJob:
    def __init__(self, spec: JobSpec, curve):
        self.spec = spec
        self.id = spec.job_id
        self.curve = curve
        self.remaining = float(spec.total_work)
        self.attained = 0.0  # GPU-seconds held
        self.group = 0
        self.group_base = 0.0  # attained when the job last entered G_0
        self.alloc: dict[int, int] = {}
        self.rate_p = 0  # GPUs actually training
        self.target_p = 0  # parallelism once newcomers are ready
        self.switch_at: Optional[float] = None
        self.stall_until = 0.0
        self.run_time = 0.0
        self.waiting_since = spec.submit_time
        self.start_time: Optional[float] = None
        self.finish_time: Optional[float] = None
        self.resizes = 0
        self.preemptions = 0

    @property
    def p(self) -> int:
        return sum(self.alloc.values())

    @property
    def running(self) -> bool:
        return bool(self.alloc)

    def rate(self, now: float) -> float:
        if not self.alloc or now < self.stall_until - _EPS or self.rate_p <= 0:
            return 0.0
        return self.curve.rate(self.rate_p)

    def __repr__(self):
        return f"<job {self.id} g{self.group} p={self.p}/{self.spec.p} rem={self.remaining:.1f}>"


@dataclass
class Sample:
    time: float
    used: int
    efficiency: float  # sum of per-GPU efficiency, idle and stalled GPUs count 0
    running: int
    waiting: int


@dataclass
class Metrics:
    policy: str
    total_gpus: int
    jct: dict = field(default_factory=dict)
    series: list = field(default_factory=list)
    end_time: float = 0.0
    resizes: int = 0
    preemptions: int = 0
    plans: list = field(default_factory=list)

    def _jcts(self) -> np.ndarray:
        return np.array([self.jct[k] for k in sorted(self.jct)], dtype=float)

    @property
    def mean_jct(self) -> float:
        a = self._jcts()
        return float(a.mean()) if len(a) else 0.0

    @property
    def median_jct(self) -> float:
        a = self._jcts()
        return float(np.median(a)) if len(a) else 0.0

    @property
    def p95_jct(self) -> float:
        a = self._jcts()
        return float(np.percentile(a, 95)) if len(a) else 0.0

    def _time_avg(self, attr: str, t0: Optional[float] = None, t1: Optional[float] = None) -> float:
        s = self.series
        if not s:
            return 0.0
        t0 = s[0].time if t0 is None else t0
        t1 = self.end_time if t1 is None else t1
        if t1 <= t0:
            return 0.0
        total = 0.0
        for a, b in zip(s, s[1:] + [Sample(t1, 0, 0.0, 0, 0)]):
            lo, hi = max(a.time, t0), min(b.time, t1)
            if hi > lo:
                total += getattr(a, attr) * (hi - lo)
        return total / (t1 - t0)

    def mean_utilization(self, t0=None, t1=None) -> float:
        return self._time_avg("used", t0, t1) / self.total_gpus

    def mean_cluster_efficiency(self, t0=None, t1=None) -> float:
        return self._time_avg("efficiency", t0, t1) / self.total_gpus

    def at(self, t: float) -> Sample:
        """State in effect at time ``t``."""
        times = [s.time for s in self.series]
        i = int(np.searchsorted(times, t, side="right")) - 1
        return self.series[max(i, 0)]

    def grid(self, step: float = 1.0, t0: float = 0.0, t1: Optional[float] = None) -> list[Sample]:
        t1 = self.end_time if t1 is None else t1
        return [self.at(t) for t in np.arange(t0, t1, step)]

    def summary(self) -> dict:
        return {"policy": self.policy, "jobs": len(self.jct),
                "mean_jct": self.mean_jct, "median_jct": self.median_jct, "p95_jct": self.p95_jct,
                "mean_utilization": self.mean_utilization(),
                "mean_cluster_efficiency": self.mean_cluster_efficiency(),
                "end_time": self.end_time, "resizes": self.resizes,
                "preemptions": self.preemptions}

    def write_series(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_s", "used_gpus", "utilization", "cluster_efficiency",
                        "normalized_efficiency", "avg_gpu_efficiency", "running", "waiting"])
            for s in self.series:
                avg = s.efficiency / s.used if s.used else 0.0
                w.writerow([f"{s.time:.6f}", s.used, f"{s.used / self.total_gpus:.6f}",
                            f"{s.efficiency:.6f}", f"{s.efficiency / self.total_gpus:.6f}",
                            f"{avg:.6f}", s.running, s.waiting])

    def write_jct(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["job_id", "jct_s"])
            for k in sorted(self.jct, key=lambda k: (len(k), k)):
                w.writerow([k, f"{self.jct[k]:.6f}"])


def reduction(base: float, new: float) -> float:
    """Percentage by which ``new`` improves on ``base``."""
    return 100.0 * (base - new) / base if base else 0.0


def compare(base: Metrics, new: Metrics) -> dict:
    rows = {}
    for k in ("mean_jct", "median_jct", "p95_jct"):
        b, n = getattr(base, k), getattr(new, k)
        rows[k] = {base.policy: b, new.policy: n, "reduction_pct": reduction(b, n)}
    return rows


def format_comparison(base: Metrics, new: Metrics) -> str:
    rows = compare(base, new)
    w = max(len(base.policy), len(new.policy), 10)
    lines = [f"{'':<12}{base.policy:>{w + 2}}{new.policy:>{w + 2}}{'Reduction (%)':>16}"]
    names = {"mean_jct": "Average", "median_jct": "Median", "p95_jct": "95th"}
    for k, r in rows.items():
        lines.append(f"{names[k]:<12}{r[base.policy]:>{w + 2}.1f}{r[new.policy]:>{w + 2}.1f}"
                     f"{r['reduction_pct']:>16.1f}")
    return "\n".join(lines)


class ClusterSim:
    """Cluster state plus the primitives policies use to change it."""

    def __init__(self, trace: Trace, machines: int = 8, gpus_per_machine: int = 8,
                 overheads: OverheadModel = EDL):
        trace.validate()
        self.trace = trace
        self.n_machines = machines
        self.m = gpus_per_machine
        self.total = machines * gpus_per_machine
        self.overheads = overheads
        self.free = [gpus_per_machine] * machines
        self.now = 0.0
        self.jobs: dict[str, SimJob] = {}
        self.active: dict[str, SimJob] = {}  # submitted and not finished
        self.finished: list[SimJob] = []
        self.resizes = 0
        self.preemptions = 0
        self.plans: list[dict] = []
        for spec in trace.jobs:
            if spec.p > self.total:
                raise TraceInvalid(f"job {spec.job_id} asks for {spec.p} GPUs, cluster has {self.total}")

    # -- queries -------------------------------------------------------------------

    def running(self) -> list[SimJob]:
        return [j for j in self.active.values() if j.running]

    def waiting(self) -> list[SimJob]:
        return [j for j in self.active.values() if not j.running]

    @property
    def idle(self) -> int:
        return sum(self.free)

    def cluster_efficiency(self) -> float:
        return sum(j.rate(self.now) for j in self.active.values() if j.running)

    def check(self) -> None:
        """Conservation and no double booking."""
        used = [0] * self.n_machines
        for j in self.active.values():
            for mach, c in j.alloc.items():
                assert c > 0
                used[mach] += c
        for mach in range(self.n_machines):
            assert used[mach] + self.free[mach] == self.m, (mach, used[mach], self.free[mach])
            assert self.free[mach] >= 0

    # -- placement -----------------------------------------------------------------

    def find_placement(self, p: int, free: Optional[list] = None,
                       max_machines: Optional[int] = None) -> Optional[dict]:
        """``p`` GPUs on at most ``max_machines`` machines (default ceil(p/m))."""
        free = self.free if free is None else free
        k = max_machines or machines_needed(p, self.m)
        if k == 1:
            fits = [i for i in range(self.n_machines) if free[i] >= p]
            if not fits:
                return None
            best = min(fits, key=lambda i: (free[i], i))  # best fit
            return {best: p}
        order = sorted(range(self.n_machines), key=lambda i: (-free[i], i))[:k]
        if sum(free[i] for i in order) < p:
            return None
        alloc, need = {}, p
        for i in order:
            take = min(free[i], need)
            if take:
                alloc[i] = take
                need -= take
        return alloc

    def _take(self, alloc: dict) -> None:
        for mach, c in alloc.items():
            if self.free[mach] < c:
                raise RuntimeError(f"machine {mach} has {self.free[mach]} free GPUs, need {c}")
            self.free[mach] -= c

    def _give(self, alloc: dict) -> None:
        for mach, c in alloc.items():
            self.free[mach] += c

    def start(self, job: SimJob, alloc: dict) -> None:
        assert not job.running
        self._take(alloc)
        job.alloc = dict(alloc)
        job.rate_p = job.target_p = job.p
        job.switch_at = None
        job.stall_until = self.now
        if job.start_time is None:
            job.start_time = self.now

    def preempt(self, job: SimJob) -> None:
        self._give(job.alloc)
        job.alloc = {}
        job.rate_p = job.target_p = 0
        job.switch_at = None
        job.waiting_since = self.now
        job.preemptions += 1
        self.preemptions += 1

    def resize(self, job: SimJob, alloc: dict) -> None:
        """Change a running job's GPUs and charge the scaling overhead."""
        old, new = job.p, sum(alloc.values())
        if new == old and alloc == job.alloc:
            return
        if new < 1:
            raise ValueError("cannot resize to zero GPUs; preempt instead")
        self._give(job.alloc)
        self._take(alloc)
        job.alloc = {k: v for k, v in alloc.items() if v}
        job.resizes += 1
        self.resizes += 1
        oh = self.overheads
        if oh.stop_resume:
            stall = oh.scale_out_stall if new > old else oh.scale_in_stall
            job.stall_until = max(job.stall_until, self.now) + stall
            job.rate_p = job.target_p = new
            job.switch_at = None
            return
        if new > job.rate_p:
            job.target_p = new
            if job.switch_at is None:
                if oh.newcomer_prep > 0:
                    job.switch_at = self.now + oh.newcomer_prep
                else:
                    self._switch(job)
        else:
            job.rate_p = job.target_p = new
            job.switch_at = None
            if oh.scale_in_stall > 0:
                job.stall_until = max(job.stall_until, self.now + oh.scale_in_stall)

    def _switch(self, job: SimJob) -> None:
        job.switch_at = None
        job.rate_p = job.target_p = job.p
        if self.overheads.scale_out_stall > 0:
            job.stall_until = max(job.stall_until, self.now + self.overheads.scale_out_stall)

    # -- main loop -----------------------------------------------------------------

    def _advance(self, dt: float) -> None:
        if dt <= 0:
            return
        for j in self.active.values():
            if j.running:
                r = j.rate(self.now)
                if r > 0:
                    j.remaining -= r * dt
                j.attained += j.p * dt
                j.run_time += dt
        self.now += dt

    def _next_time(self, policy, next_arrival: float) -> float:
        t = next_arrival
        now = self.now
        for j in self.active.values():
            if j.running:
                if j.stall_until > now + _EPS:
                    t = min(t, j.stall_until)
                else:
                    r = j.rate(now)
                    if r > 0:
                        t = min(t, now + j.remaining / r)
                if j.switch_at is not None:
                    t = min(t, j.switch_at)
                d = policy.demotion_time(j, now)
                if d is not None:
                    t = min(t, d)
            else:
                d = policy.promotion_time(j, now)
                if d is not None:
                    t = min(t, d)
        return max(t, now)

    def run(self, policy, until: Optional[float] = None, seed: int = 0) -> Metrics:
        """Simulate to completion (or ``until``)."""
        jobs = list(self.trace.jobs)
        metrics = Metrics(getattr(policy, "name", type(policy).__name__), self.total)
        i = 0
        horizon = math.inf if until is None else until
        if jobs:
            self.now = min(jobs[0].submit_time, horizon)
        policy.attach(self)
        while i < len(jobs) or self.active:
            nxt = jobs[i].submit_time if i < len(jobs) else math.inf
            t = min(self._next_time(policy, nxt), horizon)
            if t == math.inf:
                raise RuntimeError("simulation stalled: jobs waiting but nothing can run "
                                   f"({[j.id for j in self.waiting()][:5]})")
            self._advance(t - self.now)
            if self.now >= horizon:
                break
            changed = False
            while i < len(jobs) and jobs[i].submit_time <= self.now + _EPS:
                spec = jobs[i]
                job = SimJob(spec, self.trace.curve(spec))
                self.jobs[job.id] = job
                self.active[job.id] = job
                i += 1
                changed = True
            for j in list(self.active.values()):
                if j.running and j.remaining <= 1e-9 * max(1.0, j.spec.total_work):
                    self._give(j.alloc)
                    j.alloc = {}
                    j.finish_time = self.now
                    del self.active[j.id]
                    self.finished.append(j)
                    metrics.jct[j.id] = j.finish_time - j.spec.submit_time
                    changed = True
                    continue
                if j.switch_at is not None and j.switch_at <= self.now + _EPS:
                    self._switch(j)
                if policy.update_priority(j, self.now):
                    changed = True
            if changed:
                policy.schedule(self)
            metrics.series.append(Sample(self.now, self.total - self.idle, self.cluster_efficiency(),
                                         len(self.running()), len(self.waiting())))
        metrics.end_time = self.now
        metrics.resizes = self.resizes
        metrics.preemptions = self.preemptions
        metrics.plans = self.plans
        return metrics


def simulate(trace: Trace, policy, overheads: OverheadModel = EDL, machines: int = 8,
             gpus_per_machine: int = 8, until: Optional[float] = None, seed: int = 0) -> Metrics:
    """Run ``policy`` over ``trace`` on a fresh cluster."""
    sim = ClusterSim(trace, machines, gpus_per_machine, overheads)
    return sim.run(policy, until=until, seed=seed)


def write_summary(path: str, metrics: list, baseline: Optional[Metrics] = None) -> None:
    out = {"policies": [m.summary() for m in metrics]}
    if baseline is not None:
        out["reduction_pct"] = {m.policy: {k: v["reduction_pct"] for k, v in compare(baseline, m).items()}
                                for m in metrics if m is not baseline}
    with open(path, "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
