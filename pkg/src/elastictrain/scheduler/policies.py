"""Scheduling policies for :class:`~elastictrain.scheduler.simulator.ClusterSim`.

* :class:`Static` runs jobs first-come first-served at their requested
  parallelism and never preempts.
* :class:`Tiresias` keeps jobs in priority groups by attained GPU-seconds and
  re-plans on every arrival, completion, demotion, and promotion.
* :class:`ElasticTiresias` adds compaction (R1) when more than ``N`` jobs
  wait and greedy expansion (R2) when none do.
"""
from __future__ import annotations

import math
from typing import Optional

from .simulator import ClusterSim, SimJob, machines_needed

DEFAULT_QUANTA = (500.0, 10_000.0)


class Static:
    name = "static"

    def __init__(self, backfill: bool = False):
        self.backfill = backfill

    def attach(self, sim: ClusterSim) -> None:
        self.sim = sim

    def demotion_time(self, job, now):
        return None

    def promotion_time(self, job, now):
        return None

    def update_priority(self, job, now) -> bool:
        return False

    def schedule(self, sim: ClusterSim) -> None:
        for j in sorted(sim.waiting(), key=lambda j: (j.spec.submit_time, j.id)):
            alloc = sim.find_placement(j.spec.p)
            if alloc is None:
                if self.backfill:
                    continue
                break
            sim.start(j, alloc)


class Tiresias:
    """Discretized least-attained-service scheduling.

    ``quanta[i]`` is the GPU-second budget of group ``G_i``; a job that has
    used it moves to ``G_{i+1}``. A job in a lower group that has waited more
    than ``starvation_knob`` times its run time so far is moved back to
    ``G_0`` with a fresh budget.
    """

    name = "tiresias"

    def __init__(self, quanta=DEFAULT_QUANTA, starvation_knob: float = 8.0,
                 preempt: bool = True):
        self.quanta = tuple(float(q) for q in quanta)
        self.thresholds = [sum(self.quanta[:i + 1]) for i in range(len(self.quanta))]
        self.starvation_knob = starvation_knob
        self.preempt = preempt
        self.demotions = 0
        self.promotions = 0

    def attach(self, sim: ClusterSim) -> None:
        self.sim = sim

    # -- priority groups -------------------------------------------------------

    def _threshold(self, job: SimJob) -> Optional[float]:
        if job.group >= len(self.thresholds):
            return None
        return job.group_base + self.thresholds[job.group]

    def demotion_time(self, job: SimJob, now: float) -> Optional[float]:
        thr = self._threshold(job)
        if thr is None or job.p == 0:
            return None
        return now + max(0.0, thr - job.attained) / job.p

    def promotion_time(self, job: SimJob, now: float) -> Optional[float]:
        if job.group == 0 or self.starvation_knob is None or job.run_time <= 0:
            return None
        return job.waiting_since + self.starvation_knob * job.run_time

    def update_priority(self, job: SimJob, now: float) -> bool:
        changed = False
        thr = self._threshold(job)
        while thr is not None and job.attained >= thr - 1e-6:
            job.group += 1
            self.demotions += 1
            changed = True
            thr = self._threshold(job)
        if not job.running and job.group > 0:
            t = self.promotion_time(job, now)
            if t is not None and t <= now + 1e-9:
                job.group = 0
                job.group_base = job.attained
                job.waiting_since = now
                self.promotions += 1
                changed = True
        return changed

    @staticmethod
    def priority(job: SimJob) -> tuple:
        return (job.group, job.spec.submit_time, job.id)

    # -- plan ------------------------------------------------------------------

    def schedule(self, sim: ClusterSim) -> None:
        self.place_waiting(sim)

    def place_waiting(self, sim: ClusterSim) -> None:
        order = sorted(sim.active.values(), key=self.priority)
        rank = {j.id: i for i, j in enumerate(order)}
        room = None
        for j in order:
            if j.running:
                continue
            alloc = sim.find_placement(j.spec.p)
            if alloc is None:
                if room is None:
                    room = self._room(sim, order)
                alloc = self._make_room(sim, j, order, rank, room)
                if alloc is not None:
                    room = None
            if alloc is not None:
                sim.start(j, alloc)

    def _room(self, sim: ClusterSim, order) -> tuple:
        """Reclaim steps plus, per rank, the GPUs held by that rank and below."""
        reclaim = self._reclaim_candidates(sim, order)
        below = [0] * (len(order) + 1)
        for i in range(len(order) - 1, -1, -1):
            below[i] = below[i + 1] + order[i].p
        return reclaim, sum(v.p - sum(a.values()) for v, a in reclaim), below

    def _reclaim_candidates(self, sim, order) -> list:
        """(job, smaller allocation) steps to try before preempting."""
        return []

    def _make_room(self, sim: ClusterSim, job: SimJob, order, rank, room) -> Optional[dict]:
        reclaim, surplus, below = room
        bound = sim.idle + surplus + (below[rank[job.id] + 1] if self.preempt else 0)
        if bound < job.spec.p:
            return None
        free = list(sim.free)
        shrinks: list = []  # (victim, new alloc)
        for victim, new_alloc in reclaim:
            for mach, c in victim.alloc.items():
                free[mach] += c - new_alloc.get(mach, 0)
            shrinks.append((victim, new_alloc))
            if sim.find_placement(job.spec.p, free) is not None:
                return self._commit(sim, job, shrinks, [])
        if not self.preempt:
            return None
        shrunk = {id(v): a for v, a in shrinks}
        victims = []
        for v in reversed(order):
            if rank[v.id] <= rank[job.id]:
                break
            if not v.running:
                continue
            for mach, c in shrunk.get(id(v), v.alloc).items():
                free[mach] += c
            victims.append(v)
            if sim.find_placement(job.spec.p, free) is not None:
                return self._commit(sim, job, shrinks, victims)
        return None

    def _commit(self, sim, job, shrinks, victims) -> Optional[dict]:
        vset = {id(v) for v in victims}
        for v, na in shrinks:
            if id(v) not in vset:
                sim.resize(v, na)
        for v in victims:
            sim.preempt(v)
        return sim.find_placement(job.spec.p)


def _shrink_alloc(alloc: dict, n: int, free: list) -> dict:
    """Remove ``n`` GPUs, emptying the job's smallest fragments first."""
    out = dict(alloc)
    for mach in sorted(out, key=lambda k: (out[k], -free[k], k)):
        if n == 0:
            break
        take = min(out[mach], n)
        out[mach] -= take
        n -= take
    return {k: v for k, v in out.items() if v}


class ElasticTiresias(Tiresias):
    """Tiresias plus compaction (R1) and expansion (R2).

    GPUs granted by R2 beyond a job's requested parallelism are reclaimed
    before anything is preempted. ``protect_top`` keeps jobs in ``G_0`` from
    donating GPUs in R1.
    """

    name = "elastic-tiresias"

    def __init__(self, quanta=DEFAULT_QUANTA, N: int = 10, r: float = 0.5,
                 starvation_knob: float = 8.0, preempt: bool = True, protect_top: bool = True):
        super().__init__(quanta, starvation_knob, preempt)
        if N < 0:
            raise ValueError("N must be non-negative")
        if not 0 < r <= 1:
            raise ValueError("r must be in (0, 1]")
        self.N = N
        self.r = r
        self.protect_top = protect_top

    def schedule(self, sim: ClusterSim) -> None:
        self.place_waiting(sim)
        waiting = sim.waiting()
        if len(waiting) > self.N:
            donors = None
            for j in sorted(waiting, key=self.priority):
                if donors is None:
                    donors = self.donors(sim)
                if not donors and sim.idle == 0:
                    break
                plan = self.compaction_plan(sim, j, donors)
                if plan is not None:
                    self.apply_plan(sim, plan)
                    donors = None
        if not sim.waiting():
            self.expand(sim)

    def _reclaim_candidates(self, sim, order):
        out = []
        for v in reversed(order):
            if v.running and v.p > v.spec.p:
                out.append((v, _shrink_alloc(v.alloc, v.p - v.spec.p, sim.free)))
        return out

    # -- R1 --------------------------------------------------------------------

    def min_parallelism(self, job: SimJob) -> int:
        return max(1, math.ceil(self.r * job.spec.p - 1e-12))

    def donors(self, sim: ClusterSim) -> list:
        """Jobs that may give GPUs, lowest priority first."""
        out = []
        for j in sim.running():
            if not j.spec.elastic:
                continue
            if self.protect_top and j.group == 0:
                continue
            if j.p > self.min_parallelism(j):
                out.append(j)
        out.sort(key=self.priority, reverse=True)
        return out

    def compaction_plan(self, sim: ClusterSim, job: SimJob, donors=None) -> Optional[dict]:
        """Best ``p`` for a pending job, taking idle GPUs then donor GPUs.

        Gain is the change in cluster efficiency: the pending job's
        ``p*e(p)`` plus the donors' ``p'*e(p') - p*e(p)``. GPUs for the
        pending job come from at most ceil(p_i/m) machines.
        """
        if donors is None:
            donors = self.donors(sim)
        k = machines_needed(job.spec.p, sim.m)
        spare = {d.id: d.p - self.min_parallelism(d) for d in donors}
        avail = list(sim.free)
        for d in donors:
            budget = spare[d.id]
            for mach, c in sorted(d.alloc.items()):
                give = min(c, budget)
                avail[mach] += give
                budget -= give
        machines = sorted(range(sim.n_machines), key=lambda i: (-avail[i], -sim.free[i], i))[:k]
        # the order in which GPUs are handed to the pending job
        source: list = [(None, mach) for mach in machines for _ in range(sim.free[mach])]
        for d in donors:
            budget = spare[d.id]
            for mach in machines:
                give = min(d.alloc.get(mach, 0), budget)
                source.extend((d, mach) for _ in range(give))
                budget -= give
        pmax = min(job.spec.p, len(source))
        taken: dict[str, int] = {}
        donor_delta = 0.0
        best_p, best_gain = None, 1e-12
        for p in range(1, pmax + 1):
            d, _ = source[p - 1]
            if d is not None:
                n = taken.get(d.id, 0)
                donor_delta += d.curve.rate(d.p - n - 1) - d.curve.rate(d.p - n)
                taken[d.id] = n + 1
            if not job.curve.supports(p) or (not job.spec.elastic and p != job.spec.p):
                continue
            gain = job.curve.rate(p) + donor_delta
            if gain > best_gain + 1e-12:
                best_p, best_gain = p, gain
        if best_p is None:
            return None
        alloc: dict[int, int] = {}
        take: dict[str, dict] = {}
        by_id = {}
        for d, mach in source[:best_p]:
            alloc[mach] = alloc.get(mach, 0) + 1
            if d is not None:
                by_id[d.id] = d
                t = take.setdefault(d.id, {})
                t[mach] = t.get(mach, 0) + 1
        changes = []
        for did, t in take.items():
            d = by_id[did]
            new_alloc = {mach: c - t.get(mach, 0) for mach, c in d.alloc.items()}
            changes.append((d, {mach: c for mach, c in new_alloc.items() if c}))
        return {"job": job, "p": best_p, "alloc": alloc, "donors": changes, "gain": best_gain}

    def apply_plan(self, sim: ClusterSim, plan: dict) -> None:
        record = {"time": sim.now, "job": plan["job"].id, "p": plan["p"], "gain": plan["gain"],
                  "machines": len(plan["alloc"]),
                  "max_machines": machines_needed(plan["job"].spec.p, sim.m),
                  "donors": [{"job": d.id, "group": d.group, "from": d.p,
                              "to": sum(a.values()), "min": self.min_parallelism(d),
                              "elastic": d.spec.elastic} for d, a in plan["donors"]]}
        for d, new_alloc in plan["donors"]:
            sim.resize(d, new_alloc)
        sim.start(plan["job"], plan["alloc"])
        sim.plans.append(record)

    # -- R2 --------------------------------------------------------------------

    def _grow_target(self, sim: ClusterSim, job: SimJob) -> Optional[int]:
        """Machine that can host one more GPU for ``job`` within locality."""
        own = [m for m in sorted(job.alloc, key=lambda m: (-job.alloc[m], m)) if sim.free[m] > 0]
        if own:
            return own[0]
        if len(job.alloc) + 1 <= machines_needed(job.p + 1, sim.m):
            others = [m for m in range(sim.n_machines) if m not in job.alloc and sim.free[m] > 0]
            if others:
                return max(others, key=lambda m: (sim.free[m], -m))
        return None

    def expansion_grants(self, sim: ClusterSim) -> list:
        """Greedy +1 GPU grants; applies them and returns [(job id, machine)]."""
        grants = []
        targets: dict[str, dict] = {}
        while sim.idle > 0:
            best, best_gain, best_mach = None, 0.0, None
            for j in sim.running():
                if not j.spec.elastic:
                    continue
                g = j.curve.gain(j.p)
                if g <= 0 or (best is not None and g <= best_gain):
                    continue
                mach = self._grow_target(sim, j)
                if mach is None:
                    continue
                best, best_gain, best_mach = j, g, mach
            if best is None:
                break
            new_alloc = dict(best.alloc)
            new_alloc[best_mach] = new_alloc.get(best_mach, 0) + 1
            # grow in place so one resize covers all grants to a job
            sim._give(best.alloc)
            sim._take(new_alloc)
            targets.setdefault(best.id, dict(best.alloc))
            best.alloc = new_alloc
            grants.append((best.id, best_mach))
        for jid, old_alloc in targets.items():
            j = sim.active[jid]
            new_alloc = j.alloc
            j.alloc = old_alloc
            sim._give(new_alloc)
            sim._take(old_alloc)
            sim.resize(j, new_alloc)
        return grants

    def expand(self, sim: ClusterSim) -> list:
        return self.expansion_grants(sim)


class Elastic(ElasticTiresias):
    """First-come first-served with elastic compaction and expansion.

    Every job stays in one group, so any running job may donate GPUs, and
    compaction starts as soon as one job waits.
    """

    name = "elastic"

    def __init__(self, N: int = 0, r: float = 0.5):
        super().__init__(quanta=(), N=N, r=r, starvation_knob=None, preempt=False,
                         protect_top=False)


POLICIES = {
    "static": Static,
    "tiresias": Tiresias,
    "elastic-tiresias": ElasticTiresias,
    "elastic": Elastic,
}


def make_policy(name: str, **kw):
    try:
        cls = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None
    return cls(**kw)
