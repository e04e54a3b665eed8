"""Scripted and randomized event schedules for an :class:`ElasticJob`.

A scenario is a JSON object with an ``events`` list. Each event has an
``action`` and a trigger, either ``"batch": t`` (fires when mini-batch ``t``
starts) or ``"time": seconds``::

    {"events": [
        {"batch": 10, "action": "scale_out", "add": ["w4"]},
        {"batch": 30, "action": "scale_in", "remove": ["w1"]},
        {"time": 12.5, "action": "kill", "worker": "w2"},
        {"batch": 50, "action": "kill_leader"},
        {"batch": 60, "action": "straggle", "worker": "w3", "delay": 0.03},
        {"batch": 70, "action": "scale_out", "n": 2},
        {"batch": 80, "action": "checkpoint"}
    ]}

``scale_out`` and ``scale_in`` accept ``"n"`` instead of explicit ids; new ids
continue the ``w<i>`` numbering and scale-in picks the highest-ranked
non-leader workers.

Scaling commands that come back with Retry are re-issued after
``retry_after`` seconds.
"""
from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .config import RunConfig
from .job import ElasticJob

ACTIONS = ("scale_out", "scale_in", "migrate", "kill", "kill_leader", "straggle", "checkpoint")


class ScenarioInvalid(ValueError):
    pass


def load_scenario(path: str, n_workers: Optional[int] = None) -> dict:
    try:
        with open(path) as f:
            sc = json.load(f)
    except (OSError, ValueError) as e:
        raise ScenarioInvalid(f"cannot read scenario {path}: {e}") from e
    validate_scenario(sc, n_workers)
    return sc


def validate_scenario(sc: dict, n_workers: Optional[int] = None) -> None:
    """Check event syntax and ordering; with ``n_workers`` also check worker ids.

    Membership is replayed in list order starting from ``w0..w{n-1}``. After a
    ``kill_leader`` the dead worker is unknown, so later events only need to
    name workers that existed at some point.
    """
    if not isinstance(sc, dict) or not isinstance(sc.get("events", []), list):
        raise ScenarioInvalid("scenario must be an object with an 'events' list")
    last = {"batch": -1.0, "time": -1.0}
    for i, ev in enumerate(sc.get("events", [])):
        if ev.get("action") not in ACTIONS:
            raise ScenarioInvalid(f"event {i}: unknown action {ev.get('action')!r}")
        if ("batch" in ev) == ("time" in ev):
            raise ScenarioInvalid(f"event {i}: give exactly one of 'batch' or 'time'")
        key = "batch" if "batch" in ev else "time"
        if ev[key] < 0 or ev[key] < last[key]:
            raise ScenarioInvalid(f"event {i}: {key} values must be non-negative and non-decreasing")
        last[key] = ev[key]
    if n_workers is not None:
        _check_membership(sc.get("events", []), n_workers)


def _check_membership(events, n_workers: int) -> None:
    live = {f"w{i}" for i in range(n_workers)}
    used = set(live)
    fresh = n_workers
    exact = True

    def known(i, w):
        if w not in (live if exact else used):
            raise ScenarioInvalid(f"event {i}: unknown worker {w!r}")

    for i, ev in enumerate(events):
        a = ev["action"]
        if a in ("scale_out", "scale_in") and "n" in ev:
            n = int(ev["n"])
            if n < 1:
                raise ScenarioInvalid(f"event {i}: n must be positive")
            if a == "scale_out":
                add = [f"w{fresh + k}" for k in range(n)]
                fresh += n
                live.update(add)
                used.update(add)
            else:
                if n >= len(live):
                    raise ScenarioInvalid(f"event {i}: scale_in would remove every worker")
                for w in sorted(live, key=lambda w: int(w[1:]) if w[1:].isdigit() else 0)[-n:]:
                    live.discard(w)
                exact = False  # the runtime may pick differently around the leader
            continue
        add, remove = list(ev.get("add", [])), list(ev.get("remove", []))
        if a in ("kill", "straggle"):
            remove = [ev.get("worker")] if a == "kill" else []
            if a == "straggle":
                known(i, ev.get("worker"))
        for w in add:
            if w in used:
                raise ScenarioInvalid(f"event {i}: worker {w!r} already exists")
        for w in remove:
            known(i, w)
        if a == "scale_out" and not add:
            raise ScenarioInvalid(f"event {i}: scale_out needs 'add' or 'n'")
        if a == "scale_in" and not remove:
            raise ScenarioInvalid(f"event {i}: scale_in needs 'remove' or 'n'")
        if a == "migrate" and len(add) != len(remove):
            raise ScenarioInvalid(f"event {i}: migrate needs equal 'add' and 'remove' sets")
        live.difference_update(remove)
        live.update(add)
        used.update(add)
        for w in add:
            if w[1:].isdigit():
                fresh = max(fresh, int(w[1:]) + 1)
        if a == "kill_leader":
            exact = False
            if len(live) <= 1:
                raise ScenarioInvalid(f"event {i}: killing the leader would leave no workers")
            live.pop()
        if not live:
            raise ScenarioInvalid(f"event {i}: no workers would remain")


class ScenarioRunner:
    def __init__(self, job: ElasticJob, scenario: dict, retry_after: float = 0.5,
                 max_retries: int = 200, command_timeout: float = 60.0):
        validate_scenario(scenario)
        self.job = job
        self.events = scenario.get("events", [])
        self.retry_after = retry_after
        self.max_retries = max_retries
        self.command_timeout = command_timeout
        self.handles: list = []
        self.skipped: list = []
        self._fresh = 0

    def install(self) -> None:
        job = self.job
        for ev in self.events:
            if "batch" in ev:
                job.at_batch(int(ev["batch"]), lambda ev=ev: self.fire(ev))
            else:
                job.loop.call_at(float(ev["time"]), self.fire, ev)

    def fire(self, ev: dict, attempt: int = 0) -> None:
        job = self.job
        if job.finished:
            return
        a = ev["action"]
        if a == "kill":
            frac = ev.get("fraction")
            if frac is None:
                job.kill(ev["worker"])
            else:
                p = len(job.topology) if job.topology else 1
                job.loop.call_later(frac * job.compute_time(job.B // p), job.kill, ev["worker"])
            return
        if a == "kill_leader":
            lead = job.leader
            if lead is not None:
                job.kill(lead.id)
            return
        if a == "straggle":
            job.delay_worker(ev["worker"], float(ev["delay"]))
            return
        if a == "checkpoint":
            if not job.request_checkpoint():
                job.loop.call_later(self.retry_after, self.fire, ev, attempt)
            return
        if "n" in ev:
            ev = self._resolve(ev)
            if ev is None:
                return
        if a == "scale_out":
            h = job.scale_out(ev["add"], mode=ev.get("mode", "edl"))
        elif a == "scale_in":
            h = job.scale_in(ev["remove"], mode=ev.get("mode", "edl"))
        else:
            h = job.migrate(ev.get("remove", []), ev.get("add", []))
        self.handles.append((ev, h))
        self._watch(ev, h, attempt)

    def _resolve(self, ev: dict) -> Optional[dict]:
        job = self.job
        n = int(ev["n"])
        ev = {k: v for k, v in ev.items() if k != "n"}
        if ev["action"] == "scale_out":
            nums = [int(w[1:]) for w in job.workers if w[1:].isdigit()]
            self._fresh = max([self._fresh] + [k + 1 for k in nums])
            ev["add"] = [f"w{self._fresh + k}" for k in range(n)]
            self._fresh += n
            return ev
        ring = list(job.topology.ring) if job.topology else []
        lead = job.leader.id if job.leader is not None else None
        pick = [w for w in reversed(ring) if w != lead][:n]
        if not pick or len(pick) >= len(ring):
            self.skipped.append((ev, "stale", None))
            return None
        ev["remove"] = pick
        return ev

    def _watch(self, ev, h, attempt) -> None:
        job = self.job

        def check():
            if not h.done:
                if job.finished:
                    return
                if job.loop.now - h.issued_at > self.command_timeout:
                    # the leader died before replying; treat like Retry
                    h.status, h.error = "retry", "no reply"
                else:
                    job.loop.call_later(self.retry_after, check)
                    return
            if h.status == "retry" and attempt < self.max_retries:
                job.loop.call_later(self.retry_after, self._retry, ev, attempt + 1)
            elif h.status != "ack":
                self.skipped.append((ev, h.status, h.error))
        job.loop.call_soon(check)

    def _retry(self, ev, attempt) -> None:
        # membership may have changed meanwhile; drop workers that are gone
        job = self.job
        ev = dict(ev)
        live = set(job.topology.ring) if job.topology else set()
        if "remove" in ev:
            ev["remove"] = [w for w in ev["remove"] if w in live]
        if "add" in ev:
            ev["add"] = [w for w in ev["add"] if w not in job.workers]
        if ev["action"] == "scale_in" and (not ev["remove"] or len(ev["remove"]) >= len(live)):
            self.skipped.append((ev, "stale", None))
            return
        if ev["action"] == "scale_out" and not ev["add"]:
            self.skipped.append((ev, "stale", None))
            return
        if ev["action"] == "migrate" and len(ev.get("add", [])) != len(ev.get("remove", [])):
            self.skipped.append((ev, "stale", None))
            return
        self.fire(ev, attempt)


def run_scenario(config: RunConfig, scenario: Optional[dict] = None, **job_kw) -> tuple:
    """Run a job to completion under ``scenario``. Returns (job, runner)."""
    validate_scenario(scenario or {"events": []}, config.n_workers)
    job = ElasticJob(config, **job_kw)
    runner = ScenarioRunner(job, scenario or {"events": []})
    runner.install()
    job.run()
    return job, runner


def random_schedule(rng: np.random.Generator, n_events: int, n_workers: int,
                    max_batch: int, max_workers: int = 8,
                    actions=("scale_out", "scale_in", "kill", "kill_leader")) -> dict:
    """A random mix of scaling and fault events at distinct mini-batch indexes.

    Membership is tracked optimistically so most commands are valid when
    issued; ones that become stale are dropped by the runner.
    """
    live = [f"w{i}" for i in range(n_workers)]
    fresh = n_workers
    batches = sorted(rng.choice(np.arange(1, max_batch), size=min(n_events, max_batch - 1),
                                replace=False).tolist())
    events = []
    for t in batches:
        a = str(rng.choice(list(actions)))
        if a == "scale_out" and len(live) < max_workers:
            k = int(rng.integers(1, 3))
            add = [f"w{fresh + i}" for i in range(k)]
            fresh += k
            live += add
            events.append({"batch": t, "action": "scale_out", "add": add})
        elif a == "scale_in" and len(live) > 1:
            w = str(rng.choice(live))
            live.remove(w)
            events.append({"batch": t, "action": "scale_in", "remove": [w]})
        elif a == "kill" and len(live) > 1:
            w = str(rng.choice(live))
            live.remove(w)
            events.append({"batch": t, "action": "kill", "worker": w,
                           "fraction": float(rng.random())})
        elif a == "kill_leader" and len(live) > 1:
            events.append({"batch": t, "action": "kill_leader"})
            live.pop(0)  # a guess; the runner only needs it to stay non-empty
    return {"events": events}
