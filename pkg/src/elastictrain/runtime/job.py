"""A complete elastic data-parallel job on simulated time.

Workers, the co-located leader, the lease store, and the scheduler exchange
envelopes over an :class:`~elastictrain.transport.InProcFabric` driven by one
:class:`~elastictrain.clock.EventLoop`. Gradients are real: every worker
computes ``(grad_sum, count)`` on the samples the data pipeline handed it and
the ring collective sums them. Only compute and transfer durations are
modelled.

Mini-batch ``t`` proceeds as follows. Each worker pulls its share of the
aggregate batch from its prefetch buffer, "computes" for a modelled time,
then announces each gradient tensor to the leader with ``TENSOR_READY``
(the first announcement carries its progress records). The leader releases
a tensor once every worker announced it and the workers run the ring
collective on it. After the last tensor the worker applies the SGD step,
logs the mini-batch composition, and calls :meth:`Worker.notify_batch_end`.
"""
from __future__ import annotations

import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from statistics import median
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..allreduce import SUM, StallTimeout, TensorId, Topology, allreduce_group, RoundCoordinator
from ..clock import EventLoop
from ..coordination import Elected, Expired, LeaseStore, Lost, NotLeader, Won
from ..datapipeline import (DataPipeline, Drained, EpochEnd, FileDataset, PrefetchBuffer,
                            ProgressRecord, Shard, StaleShard, SyntheticDataset, UnknownWorker,
                            default_num_partitions, make_partitions)
from ..trainer import AssignmentLog, LogRecord, eta_at, local_gradient, sgd_step, tensor_bounds
from ..transport import HEADER, Envelope, InProcFabric, Kind, PeerGone
from .checkpoint import CheckpointStore, JobCheckpoint, NoCheckpoint
from .config import APPROXIMATE, CONSISTENT, RunConfig
from .policy import detect_straggler, split_batch, switch_delay

logger = logging.getLogger(__name__)

SCHEDULER = "scheduler"
LEADER_KINDS = frozenset({Kind.REGISTER, Kind.READY, Kind.TENSOR_READY, Kind.SHARD_REQUEST,
                          Kind.PROGRESS, Kind.SCALE_CMD, Kind.EXIT, Kind.FAULT})


class WorkerUnreachable(Exception):
    pass


class AllowanceExceeded(Exception):
    pass


class RetryLater(Exception):
    """The job is busy with another scaling operation."""


@dataclass(frozen=True)
class Continue:
    pass


@dataclass(frozen=True)
class SwitchTopology:
    topo: Topology


@dataclass(frozen=True)
class Exit:
    pass


@dataclass
class CommandHandle:
    id: int
    kind: str
    body: dict
    issued_at: float
    status: str = "pending"  # ack, retry or error
    error: Optional[str] = None
    done_at: Optional[float] = None

    @property
    def done(self) -> bool:
        return self.status != "pending"


@dataclass
class RecoveryReport:
    mode: str
    dead: list
    t: int
    version: int
    time: float
    leader_failed: bool = False
    no_checkpoint: bool = False


@dataclass
class ProfileReport:
    rows: list  # (parallelism, throughput in samples/s, efficiency)
    scale_in_ops: int = 0
    scale_out_ops: int = 0
    context_preps: int = 0

    @property
    def best_p(self) -> int:
        return max(self.rows, key=lambda r: (r[2], -r[0]))[0]

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("parallelism,throughput,efficiency\n")
            for p, thr, eff in self.rows:
                f.write(f"{p},{thr!r},{eff!r}\n")


@dataclass
class _PendingSwitch:
    topo: Topology
    switch_t: int
    leaving: frozenset
    newcomers: tuple
    broadcaster: Optional[str]


class _Collective:
    __slots__ = ("key", "topo", "parts", "timer")

    def __init__(self, key, topo):
        self.key = key
        self.topo = topo
        self.parts: dict = {}
        self.timer = None


# ---------------------------------------------------------------------------
# leader


class LeaderState:
    """Job state owned by whichever worker currently leads."""

    def __init__(self, me: "Worker", topo: Optional[Topology], pipeline: DataPipeline, B: int):
        self.me = me
        self.job = me.job
        self.cfg = me.job.config
        self.topo = topo
        self.pipeline = pipeline
        self.B = B
        self.op: Optional[dict] = None
        self.recovering = False
        self.stop = False
        self.round: Optional[RoundCoordinator] = None
        self.round_t = -1
        self.round_start = 0.0
        self.arrivals: dict = {}
        self.liveness_timer = None
        self.window: deque = deque(maxlen=32)  # per-mini-batch {worker: duration}
        self.intervals: deque = deque(maxlen=10)
        self.last_boundary: Optional[float] = None
        self.flagged: set = set()
        self.last_ckpt_t = 0
        self.last_ckpt_time = me.job.loop.now
        self.ckpt_requested = False
        self.boundary_t = 0
        self.boundary_snap = pipeline.snapshot()
        self.boot: Optional[dict] = None
        self.failover: Optional[dict] = None
        self.alive = True

    # -- helpers ------------------------------------------------------------

    @property
    def per_worker_batch(self) -> list[int]:
        return split_batch(self.B, len(self.topo))

    @property
    def t_cur(self) -> int:
        return self.me.counter

    def T_b(self) -> float:
        if self.intervals:
            return median(self.intervals)
        p = len(self.topo) if self.topo else self.cfg.n_workers
        return self.job.compute_time(math.ceil(self.B / p))

    def send(self, dst: str, kind: Kind, body=None) -> None:
        self.job._send(self.me.id, dst, kind, body)

    def broadcast(self, dsts: Iterable[str], kind: Kind, body=None) -> None:
        for d in dsts:
            self.send(d, kind, body)

    def reply(self, op_or_env, kind: Kind, **kw) -> None:
        if isinstance(op_or_env, dict):
            cid, dst = op_or_env["id"], op_or_env["scheduler"]
        else:
            cid, dst = op_or_env.body()["id"], op_or_env.sender
        self.send(dst, kind, {"id": cid, **kw})

    def mirror(self) -> None:
        """Keep the job meta-data in the store so a successor can recover it."""
        self.job.store.put(self.job.meta_key, {
            "t": self.boundary_t, "topo": self.topo.to_dict(), "B": self.B,
            "pipeline": self.boundary_snap})

    def new_round(self) -> None:
        if self.liveness_timer is not None:
            self.liveness_timer.cancel()
            self.liveness_timer = None
        self.round = RoundCoordinator(self.topo.ring, self.cfg.liveness_window)
        self.round_t = self.me.counter
        self.round_start = self.job.loop.now
        self.arrivals = {}

    def export(self) -> dict:
        return {"t": self.me.counter, "B": self.B, "topo": self.topo.to_dict(),
                "pipeline": self.pipeline.snapshot(), "stop": self.stop,
                "intervals": list(self.intervals), "last_ckpt_t": self.last_ckpt_t,
                "last_ckpt_time": self.last_ckpt_time, "boundary_t": self.boundary_t,
                "boundary_snap": self.boundary_snap}

    @classmethod
    def from_meta(cls, me: "Worker", meta: dict) -> "LeaderState":
        pipe = me.job.new_pipeline()
        pipe.restore(meta["pipeline"], keep_assignments=True)
        topo = Topology.from_dict(meta["topo"])
        for w in topo.ring:
            pipe.register(w)
        ls = cls(me, topo, pipe, meta["B"])
        ls.stop = meta["stop"]
        ls.intervals.extend(meta["intervals"])
        ls.last_ckpt_t = meta["last_ckpt_t"]
        ls.last_ckpt_time = meta["last_ckpt_time"]
        ls.boundary_t = meta["boundary_t"]
        ls.boundary_snap = meta["boundary_snap"]
        ls.new_round()
        return ls

    # -- dispatch -----------------------------------------------------------

    def handle(self, env: Envelope) -> None:
        if not self.alive:
            return
        k = env.kind
        if k == Kind.SCALE_CMD:
            self.on_scale(env)
        elif k == Kind.REGISTER:
            self.on_register(env)
        elif self.boot is not None or self.failover is not None:
            return  # nothing else is meaningful before the ring exists
        elif k == Kind.TENSOR_READY:
            self.on_tensor_ready(env)
        elif k == Kind.SHARD_REQUEST:
            self.on_shard_request(env)
        elif k == Kind.READY:
            self.on_ready(env)
        elif k == Kind.FAULT:
            b = env.body()
            if b["v"] == self.topo.version:
                self.recover(b["dead"])
        elif k == Kind.EXIT:
            self.job.event("exit_notice", env.sender, t=env.body()["t"])

    # -- bootstrap (job start or restart) ------------------------------------

    def begin_boot(self, ring: Sequence[str], version: int, restart: bool, ack: Optional[dict]):
        self.boot = {"ring": list(ring), "version": version, "restart": restart,
                     "registered": {self.me.id}, "ack": ack}
        self._maybe_finish_boot()

    def on_register(self, env: Envelope) -> None:
        b = env.body()
        w = env.sender
        if self.boot is not None:
            if w in self.boot["ring"]:
                self.boot["registered"].add(w)
                self._maybe_finish_boot()
            return
        if self.failover is not None:
            if w in self.failover["expected"]:
                self.failover["registered"].add(w)
                if self.failover["registered"] >= self.failover["expected"]:
                    self._finish_failover()
            return
        if self.op is not None and w in self.op["add"] and self.op["stage"] == "register":
            self.op["registered"].add(w)
            if self.op["registered"] == set(self.op["add"]):
                self.op["stage"] = "ready"
                ring = [x for x in self.topo.ring if x not in self.op["remove"]] + list(self.op["add"])
                self.op["pending"] = self.topo.next(ring)
                self.broadcast(list(self.topo.ring) + list(self.op["add"]), Kind.TOPOLOGY,
                               {"mode": "pending", "topo": self.op["pending"].to_dict()})
        elif b and b.get("late"):
            # a worker that learnt of the new leader after recovery finished
            self.job.event("late_register", w)

    def _maybe_finish_boot(self) -> None:
        boot = self.boot
        if boot["registered"] < set(boot["ring"]):
            return
        self.boot = None
        job = self.job
        topo = Topology(boot["version"], tuple(boot["ring"]))
        params, t, report = job.w0.copy(), 0, None
        self.pipeline = job.new_pipeline()
        if boot["restart"]:
            try:
                ck = job.ckpt_store.latest()
                params, t = ck.params, ck.t
                self.pipeline.restore(ck.pipeline, keep_assignments=False)
                self.B = ck.B
                nock = False
            except NoCheckpoint:
                nock = True
            job.log.truncate(t)
            if boot["ack"] is None:
                report = RecoveryReport(CONSISTENT, sorted(job.lost_workers), t, topo.version,
                                        job.loop.now, leader_failed=True, no_checkpoint=nock)
                job.recoveries.append(report)
        for w in topo.ring:
            self.pipeline.register(w)
        self.topo = topo
        self.boundary_t = t
        self.last_ckpt_t = t
        self.boundary_snap = self.pipeline.snapshot()
        self.mirror()
        self.me.counter = t
        self.new_round()
        for fn in job._batch_hooks.pop(t, ()):
            job.loop.call_soon(fn)
        body = {"mode": "start", "topo": topo.to_dict(), "t": t,
                "params": [float(x) for x in params]}
        self.broadcast(topo.ring, Kind.TOPOLOGY, body)
        if boot["ack"] is not None:
            self.reply(boot["ack"], Kind.ACK, ok=True)
            job.event("scale_done", self.me.id, op=boot["ack"]["kind"], version=topo.version)

    # -- data ---------------------------------------------------------------

    def on_shard_request(self, env: Envelope) -> None:
        b = env.body()
        try:
            got = self.pipeline.next_shard(env.sender)
        except UnknownWorker:
            return
        body = {"gen": b["gen"], "epoch": self.pipeline.epoch}
        if isinstance(got, Shard):
            body["shard"] = [got.meta.index, got.resume_offset]
        else:
            body["dry"] = True
        self.send(env.sender, Kind.SHARD_REPLY, body)

    # -- gradient synchronization ---------------------------------------------

    def on_tensor_ready(self, env: Envelope) -> None:
        b = env.body()
        w = env.sender
        if b["v"] != self.topo.version or b["t"] != self.round_t or w not in self.topo:
            return
        now = self.job.loop.now
        if w not in self.arrivals:
            self.arrivals[w] = now
            for idx, off in b.get("progress", ()):
                try:
                    self.pipeline.report_progress(w, ProgressRecord(w, idx, off))
                except (StaleShard, UnknownWorker, ValueError) as e:
                    logger.warning("progress from %s rejected: %s", w, e)
        released = self.round.announce(w, TensorId(b["name"], b["len"]), now)
        if self.liveness_timer is None:
            self._arm_liveness()
        if not released:
            return
        body = {"t": self.round_t, "v": self.topo.version, "names": [x.name for x in released]}
        if len(self.round.released) == self.job.n_tensors:
            self._round_complete()
            body["stop"] = self.stop
            if self.liveness_timer is not None:
                self.liveness_timer.cancel()
                self.liveness_timer = None
        self.broadcast(self.topo.ring, Kind.READY_TO_REDUCE, body)

    def _arm_liveness(self) -> None:
        deadline = self.round.deadline()
        if deadline is None:
            return
        t, v = self.round_t, self.topo.version
        self.liveness_timer = self.job.loop.call_at(deadline, self._check_liveness, t, v)

    def _check_liveness(self, t: int, v: int) -> None:
        self.liveness_timer = None
        if not self.alive or t != self.round_t or v != self.topo.version:
            return
        try:
            self.round.check(self.job.loop.now)
        except StallTimeout as e:
            self.job.event("stall_timeout", self.me.id, missing=e.missing, t=t)
            self.recover(e.missing)
            return
        self._arm_liveness()

    def _round_complete(self) -> None:
        durations = {w: a - self.round_start for w, a in self.arrivals.items()}
        self.window.append(durations)
        s = detect_straggler(list(self.window))
        if s is not None and s not in self.flagged:
            self.flagged.add(s)
            self.job.event("straggler", s, t=self.round_t)
            if self.cfg.straggler_action == "remove" and len(self.topo) > 1:
                self.job.loop.call_soon(self.job.scale_in, [s])
        t_next = self.round_t + 1
        if self.pipeline.epoch_complete():
            if self.pipeline.epoch + 1 >= self.cfg.epochs:
                self.stop = True
            else:
                self.pipeline.begin_epoch()
        if self.cfg.max_batches is not None and t_next >= self.cfg.max_batches:
            self.stop = True

    # -- boundary ------------------------------------------------------------

    def on_boundary(self) -> None:
        """Leader duties at its own mini-batch boundary (counter already advanced)."""
        job, now, t = self.job, self.job.loop.now, self.me.counter
        if self.last_boundary is not None:
            self.intervals.append(now - self.last_boundary)
        self.last_boundary = now
        job.boundary_times[t] = now
        op = self.op
        if op is not None and op.get("switch_t") == t:
            self._apply_switch(op)
        self.boundary_t = t
        self.boundary_snap = self.pipeline.snapshot()
        if (self.ckpt_requested or t - self.last_ckpt_t >= self.cfg.checkpoint_every_batches
                or now - self.last_ckpt_time >= self.cfg.checkpoint_every_seconds):
            self.write_checkpoint()
        self.mirror()
        if op is not None and op.get("mode") == "stop_resume" and op.get("stage") == "boundary":
            self._stop_resume(op)
            return
        self.new_round()
        for fn in job._batch_hooks.pop(t, ()):
            job.loop.call_soon(fn)

    def write_checkpoint(self) -> None:
        t, now = self.me.counter, self.job.loop.now
        ck = JobCheckpoint(self.me.w.copy(), t, self.pipeline.epoch, self.pipeline.snapshot(),
                           self.B, {"seed": self.cfg.seed}, now)
        self.job.ckpt_store.write(ck)
        self.last_ckpt_t, self.last_ckpt_time = t, now
        self.ckpt_requested = False
        self.job.event("checkpoint", self.me.id, t=t)

    # -- scaling --------------------------------------------------------------

    def on_scale(self, env: Envelope) -> None:
        b = env.body()
        if self.op is not None or self.recovering or self.boot is not None or self.failover is not None:
            self.reply(env, Kind.RETRY)
            return
        kind, add, remove = b["kind"], list(b.get("add", [])), list(b.get("remove", []))
        ring = list(self.topo.ring)
        err = None
        if kind == "out" and not add:
            err = "scale_out needs a non-empty add set"
        elif kind == "in" and not remove:
            err = "scale_in needs a non-empty remove set"
        elif kind == "migrate" and len(add) != len(remove):
            err = "migrate needs add and remove sets of equal size"
        elif kind not in ("out", "in", "migrate"):
            err = f"unknown command kind {kind!r}"
        elif any(w not in ring for w in remove) or len(set(remove)) != len(remove):
            err = "remove set must name distinct live workers"
        elif any(w in ring or self.job._is_live(w) for w in add) or len(set(add)) != len(add):
            err = "add set must name new workers"
        elif len(ring) - len(remove) + len(add) < 1 and not b.get("teardown"):
            err = "scale_in must leave at least one worker"
        elif len(ring) - len(remove) + len(add) > self.B:
            err = "aggregate batch smaller than parallelism"
        if err:
            self.reply(env, Kind.ACK, ok=False, error=err)
            return
        if not add and not remove:
            self.reply(env, Kind.ACK, ok=True)
            return
        op = {"id": b["id"], "scheduler": env.sender, "kind": kind, "add": add, "remove": remove,
              "mode": b.get("mode", "edl"), "registered": set(), "ready": set(),
              "allowance": b.get("allowance", self.cfg.scale_in_allowance)}
        self.op = op
        self.job.event("scale_begin", self.me.id, op=kind, add=add, remove=remove, mode=op["mode"])
        if op["mode"] == "stop_resume":
            op["stage"] = "boundary"
            return
        if add:
            op["stage"] = "register"
            self.job.launch(add)
            cid = op["id"]
            self.job.loop.call_later(self.cfg.register_timeout, self._register_timeout, cid)
        else:
            op["pending"] = self.topo.next([w for w in ring if w not in remove])
            op["stage"] = "switching"
            self._schedule_switch(op)

    def on_ready(self, env: Envelope) -> None:
        op = self.op
        if op is None or op.get("stage") != "ready" or env.sender not in op["add"]:
            return
        op["ready"].add(env.sender)
        if op["ready"] == set(op["add"]):
            op["stage"] = "switching"
            self._schedule_switch(op)

    def _schedule_switch(self, op: dict) -> None:
        k = switch_delay(self.cfg.time_allowance, self.T_b())
        base = self.me.counter
        if self.round is not None and len(self.round.released) == self.job.n_tensors:
            base += 1  # current round is already in its collective
        switch_t = base + k
        op["switch_t"] = switch_t
        pending: Topology = op["pending"]
        # lowest-rank existing worker that stays; a leaver if nobody stays
        existing = [w for w in pending.ring if w not in op["add"]] or list(self.topo.ring)
        body = {"topo": pending.to_dict(), "switch_t": switch_t, "leaving": op["remove"],
                "newcomers": op["add"], "broadcaster": existing[0] if op["add"] else None}
        self.broadcast(list(self.topo.ring) + list(op["add"]), Kind.OK, body)
        self.job.event("switch_scheduled", self.me.id, t_cur=base, k=k, switch_t=switch_t,
                       version=pending.version)
        if op["remove"]:
            cid = op["id"]
            self.job.loop.call_later(op["allowance"], self._allowance_check, cid, list(op["remove"]))

    def _register_timeout(self, cid) -> None:
        op = self.op
        if not self.alive or op is None or op["id"] != cid or op["stage"] not in ("register", "ready"):
            return
        self._abort_op("WorkerUnreachable")

    def _abort_op(self, error: str) -> None:
        op, self.op = self.op, None
        if op is None:
            return
        for w in op["add"]:
            self.job.kill(w, quiet=True)
        if op.get("stage") in ("ready", "switching"):
            self.broadcast(self.topo.ring, Kind.TOPOLOGY, {"mode": "discard"})
        self.reply(op, Kind.ACK, ok=False, error=error)
        self.job.event("scale_aborted", self.me.id, error=error)

    def _allowance_check(self, cid, leavers) -> None:
        stuck = [w for w in leavers if self.job._is_live(w)
                 and self.job.workers[w].state not in ("exited", "handoff")]
        if not stuck:
            return
        self.job.event("allowance_exceeded", self.me.id, workers=stuck)
        for w in stuck:
            self.job.kill(w)

    def _apply_switch(self, op: dict) -> None:
        old = self.topo
        new: Topology = op["pending"]
        for w in op["remove"]:
            self.pipeline.unregister(w)
        for w in op["add"]:
            self.pipeline.register(w)
        self.topo = new
        self.window.clear()
        self.flagged.clear()
        self.op = None
        job = self.job
        job.stats["scale_" + ("out" if op["kind"] == "out" else op["kind"]) + "_ops"] += 1
        job.event("switch", self.me.id, t=self.me.counter, version=new.version,
                  ring=list(new.ring), old=list(old.ring))
        ack_delay = job.broadcast_time() if op["add"] else 0.0
        if self.me.id in op["remove"]:
            self.me.handoff_ack = (op, ack_delay)
        else:
            job.loop.call_later(ack_delay, self._ack_if_alive, op)

    def _ack_if_alive(self, op: dict) -> None:
        if self.alive:
            self.reply(op, Kind.ACK, ok=True)
            self.job.event("scale_done", self.me.id, op=op["kind"], version=self.topo.version)

    def _stop_resume(self, op: dict) -> None:
        """Emulated checkpoint-and-relaunch scaling, for comparison."""
        self.write_checkpoint()
        ring = [w for w in self.topo.ring if w not in op["remove"]] + list(op["add"])
        job = self.job
        job.stats["scale_" + op["kind"] + "_ops"] += 1
        job.event("stop_resume", self.me.id, t=self.me.counter, ring=ring)
        self.op = None
        ack = {"id": op["id"], "scheduler": op["scheduler"], "kind": op["kind"]}
        job.loop.call_soon(job.relaunch, ring, self.topo.version + 1, ack)

    # -- failures -------------------------------------------------------------

    def start_failover(self, meta: dict, dead_leader: str) -> None:
        """Become leader after the previous one died; gather survivors first."""
        topo = Topology.from_dict(meta["topo"])
        self.topo = topo
        self.B = meta["B"]
        self.boundary_t = meta["t"]
        self.boundary_snap = meta["pipeline"]
        self.pipeline.restore(meta["pipeline"], keep_assignments=True)
        for w in topo.ring:
            self.pipeline.register(w)
        expected = {w for w in topo.ring if w not in (dead_leader, self.me.id)}
        self.failover = {"expected": expected, "registered": set(), "dead_leader": dead_leader}
        if not expected:
            self._finish_failover()
        else:
            self.job.loop.call_later(self.cfg.liveness_window, self._failover_timeout)

    def _failover_timeout(self) -> None:
        if self.alive and self.failover is not None:
            self._finish_failover()

    def _finish_failover(self) -> None:
        fo, self.failover = self.failover, None
        # newcomers of a scaling operation the dead leader never finished
        for w in list(self.job.workers.values()):
            if w.alive and w.topo is None and w.boot is None:
                self.job.kill(w.id, quiet=True)
        dead = [w for w in self.topo.ring
                if w != self.me.id and (w == fo["dead_leader"] or w not in fo["registered"])]
        self.recover(dead, leader_failed=True)

    def recover(self, dead: Iterable[str], leader_failed: bool = False) -> None:
        job, cfg = self.job, self.cfg
        dead = [w for w in self.topo.ring if w in set(dead)]
        if not dead:
            return
        if self.op is not None:
            self._abort_op("aborted by failure")
        for w in dead:
            job.kill(w, quiet=True)
        survivors = [w for w in self.topo.ring if w not in dead]
        topo = self.topo.next(survivors)
        if len(topo) > self.B:
            topo = topo.next(survivors[:self.B])
        mode = cfg.recovery
        no_ckpt = False
        if mode == APPROXIMATE:
            t = self.boundary_t
            self.pipeline.restore(self.boundary_snap, keep_assignments=True)
            for w in dead:
                self.pipeline.unregister(w)
            bodies = {w: {"mode": "recover", "recovery": mode, "topo": topo.to_dict(), "t": t,
                          "buffer": self.pipeline.held_by(w)} for w in survivors}
        else:
            pipe = job.new_pipeline()
            try:
                ck = job.ckpt_store.latest()
                params, t = ck.params, ck.t
                pipe.restore(ck.pipeline, keep_assignments=False)
            except NoCheckpoint:
                params, t, no_ckpt = job.w0.copy(), 0, True
            self.pipeline = pipe
            for w in survivors:
                pipe.register(w)
            job.log.truncate(t)
            self.last_ckpt_t = t
            body = {"mode": "recover", "recovery": mode, "topo": topo.to_dict(), "t": t,
                    "params": [float(x) for x in params], "delay": cfg.checkpoint_io}
            bodies = {w: body for w in survivors}
        self.topo = topo
        self.boundary_t = t
        self.boundary_snap = self.pipeline.snapshot()
        self.stop = False
        self.window.clear()
        self.intervals.clear()
        self.last_boundary = None
        self.me.counter = t
        self.new_round()
        self.mirror()
        report = RecoveryReport(mode, dead, t, topo.version, job.loop.now,
                                leader_failed=leader_failed, no_checkpoint=no_ckpt)
        job.recoveries.append(report)
        job.event("recover", self.me.id, mode=mode, dead=dead, t=t, version=topo.version)
        for w, body in bodies.items():
            self.send(w, Kind.TOPOLOGY, body)


# ---------------------------------------------------------------------------
# worker


class Worker:
    """One training process: compute loop plus control inbox."""

    def __init__(self, job: "ElasticJob", wid: str, boot: Optional[dict] = None):
        self.job = job
        self.id = wid
        self.ep = job.fabric.endpoint(wid, self.on_message)
        self.alive = True
        self.state = "init"
        self.token = 0
        self.w: Optional[np.ndarray] = None
        self.shadow: Optional[np.ndarray] = None
        self.counter = 0
        self.topo: Optional[Topology] = None
        self.pending: Optional[_PendingSwitch] = None
        self.pending_topo: Optional[Topology] = None
        self.leader: Optional[str] = None
        self.lstate: Optional[LeaderState] = None
        self.awaiting_meta: Optional[dict] = None
        self._held: list = []
        self.handoff_ack = None
        self.handoff_meta: Optional[dict] = None
        self.buffer = PrefetchBuffer()
        self.gen = 0
        self.data_epoch = 0
        self.versions: list[int] = []
        self.walls: list[tuple] = []  # (t, start, end)
        self.prepared = False
        self.newcomer = boot is None
        self.boot = boot
        self.stop_after: Optional[int] = None
        self.extra_delay = 0.0
        self.unreachable = False
        self._refresh_token = 0
        self._results: dict = {}
        self._vec = None
        self.batch_ids: list = []
        self.batch_start = 0.0
        self._dead_leader: Optional[str] = None
        self.watch = job.store.watch(job.job_handle,
                                     lambda ev: job.loop.call_soon(self._on_watch, ev))

    def __repr__(self):
        return f"Worker({self.id}, {self.state}, t={self.counter})"

    # -- plumbing -------------------------------------------------------------

    def _later(self, delay: float, fn: Callable, *args):
        tok = self.token

        def run():
            if self.alive and self.token == tok:
                fn(*args)
        return self.job.loop.call_later(delay, run)

    def send(self, dst: str, kind: Kind, body=None) -> None:
        self.job._send(self.id, dst, kind, body)

    def send_leader(self, kind: Kind, body=None) -> None:
        if self.leader is not None:
            self.send(self.leader, kind, body)

    @property
    def rank(self) -> int:
        return self.topo.rank(self.id)

    def local_batch(self) -> int:
        return split_batch(self.job.B, len(self.topo))[self.rank]

    def die(self) -> None:
        self.alive = False
        self.state = "dead"
        self.token += 1
        self._refresh_token += 1
        if self.lstate is not None:
            self.lstate.alive = False
            if self.lstate.liveness_timer is not None:
                self.lstate.liveness_timer.cancel()
        self.job.fabric.disconnect(self.id)
        self.watch.close()

    # -- launch and leader discovery -----------------------------------------

    def launch(self, prep: float) -> None:
        self.state = "preparing"
        self._later(prep, self._prepared)
        if self.newcomer:
            self._discover()

    def _discover(self) -> None:
        if self.unreachable:
            return
        rec = self.job.store.leader(self.job.job_handle)
        if rec is None:
            self._later(self.job.store.poll_interval, self._discover)
            return
        self.leader = rec.address
        self.send_leader(Kind.REGISTER, {"id": self.id})

    def _prepared(self) -> None:
        self.prepared = True
        if self.boot is not None:
            self.state = "idle"
            self._campaign()
        elif self.pending_topo is not None:
            self.state = "idle"
            self.send_leader(Kind.READY, {"v": self.pending_topo.version})
        else:
            self.state = "idle"

    def _campaign(self) -> None:
        res = self.job.store.cas_put_if_absent_or_expired(self.job.job_handle, self.id)
        if isinstance(res, Won):
            self._become_leader()
        elif isinstance(res, Lost):
            self.leader = res.address
            self.send_leader(Kind.REGISTER, {"id": self.id, "boot": True})

    def _become_leader(self) -> None:
        self.leader = self.id
        self._refresh_token += 1
        self._schedule_refresh(self._refresh_token)
        job = self.job
        if self.boot is not None:
            boot, self.boot = self.boot, None
            self.lstate = LeaderState(self, None, job.new_pipeline(), job.B)
            self.lstate.begin_boot(boot["ring"], boot["version"], boot["restart"], boot.get("ack"))
            return
        if self.awaiting_meta is not None:
            return  # graceful handoff: wait for JOB_META
        meta = job.store.get(job.meta_key)
        self.lstate = LeaderState(self, None, job.new_pipeline(), job.B)
        self.lstate.start_failover(meta, self._dead_leader)

    def _schedule_refresh(self, tok: int) -> None:
        def refresh():
            if not self.alive or tok != self._refresh_token:
                return
            try:
                self.job.store.refresh(self.job.job_handle, self.id)
            except NotLeader:
                self.job.event("lease_lost", self.id)
                return
            self.job.loop.call_later(self.job.store.refresh_period, refresh)
        self.job.loop.call_later(self.job.store.refresh_period, refresh)

    def _on_watch(self, ev) -> None:
        if not self.alive:
            return
        job = self.job
        if isinstance(ev, Elected):
            if self.handoff_meta is not None and ev.address != self.id:
                self.send(ev.address, Kind.JOB_META, self.handoff_meta)
                self._finish_exit()
                return
            changed = ev.address != self.leader
            self.leader = ev.address
            if self.boot is not None and ev.address != self.id:
                if self.prepared:
                    self.send_leader(Kind.REGISTER, {"id": self.id, "boot": True})
                return
            if changed and ev.address != self.id and self.state == "orphaned":
                self.send_leader(Kind.REGISTER, {"id": self.id, "recover": True})
            return
        if not isinstance(ev, Expired):
            return
        if self.handoff_meta is not None or self.lstate is not None:
            return
        if self.boot is not None:
            if self.prepared:
                self._campaign()
            return
        member = self.topo is not None and self.id in self.topo
        if ev.erased and self.pending_topo is not None and self.id in self.pending_topo:
            member = True  # newcomer of a migration whose old members all leave
        if not member or self.state in ("exited", "init"):
            return
        old = self.leader
        self.leader = None
        if ev.erased:
            self.awaiting_meta = {"from": old}
            res = job.store.cas_put_if_absent_or_expired(job.job_handle, self.id)
            if isinstance(res, Won):
                self._become_leader()
                self._later(job.config.liveness_window, self._meta_timeout, old)
            else:
                self.awaiting_meta = None
                self.leader = res.address
            # requests still in flight to the old leader are lost with it
            self.buffer.requested = 0
            if self.state in ("data", "wait_data", "compute", "sync", "stalled"):
                self._prefetch()
        else:
            self._dead_leader = old
            self.state = "orphaned"
            self.token += 1
            res = job.store.cas_put_if_absent_or_expired(job.job_handle, self.id)
            if isinstance(res, Won):
                self._become_leader()
            else:
                self.leader = res.address
                self.send_leader(Kind.REGISTER, {"id": self.id, "recover": True})

    def _meta_timeout(self, old) -> None:
        if self.awaiting_meta is not None and self.lstate is None:
            self.awaiting_meta = None
            self._dead_leader = old
            self.token += 1
            self.state = "orphaned"
            meta = self.job.store.get(self.job.meta_key)
            self.lstate = LeaderState(self, None, self.job.new_pipeline(), self.job.B)
            self.lstate.start_failover(meta, old)

    # -- message dispatch ------------------------------------------------------

    def on_message(self, env: Envelope) -> None:
        if not self.alive:
            return
        k = env.kind
        if k in LEADER_KINDS:
            if self.lstate is not None:
                self.lstate.handle(env)
            elif self.awaiting_meta is not None:
                if k == Kind.SCALE_CMD:
                    self.send(env.sender, Kind.RETRY, {"id": env.body()["id"]})
                else:
                    self._held.append(env)
            elif k == Kind.SCALE_CMD:
                self.send(env.sender, Kind.RETRY, {"id": env.body()["id"]})
            return
        b = env.body()
        if k == Kind.SHARD_REPLY:
            self._on_shard_reply(b)
        elif k == Kind.READY_TO_REDUCE:
            self._on_ready_to_reduce(b)
        elif k == Kind.TOPOLOGY:
            self._on_topology(b)
        elif k == Kind.OK:
            self._on_ok(b)
        elif k == Kind.MODEL_BROADCAST:
            self._on_model(b)
        elif k == Kind.JOB_META:
            self._on_meta(b)

    def _on_meta(self, meta: dict) -> None:
        if self.awaiting_meta is None:
            return
        self.awaiting_meta = None
        self.lstate = LeaderState.from_meta(self, meta)
        held, self._held = self._held, []
        for env in held:
            self.lstate.handle(env)
        ack = meta.get("ack")
        if ack is not None:
            self.lstate._ack_if_alive(ack)

    def _on_topology(self, b: dict) -> None:
        mode = b["mode"]
        if mode == "pending":
            self.pending_topo = Topology.from_dict(b["topo"])
            if self.newcomer and self.prepared and self.state == "idle":
                self.send_leader(Kind.READY, {"v": self.pending_topo.version})
        elif mode == "discard":
            self.pending_topo = None
            self.pending = None
        elif mode == "start":
            self.boot = None
            self.newcomer = False
            self._install(Topology.from_dict(b["topo"]), b["t"])
            self.w = np.array(b["params"], dtype=np.float64)
            self.shadow = self.w.copy()
            self.buffer.clear()
            self.start_batch()
        elif mode == "recover":
            self.token += 1
            self.gen += 1
            self._install(Topology.from_dict(b["topo"]), b["t"])
            self.pending = None
            self.pending_topo = None
            if b["recovery"] == APPROXIMATE:
                if self.shadow is None:
                    return  # joined but never received the model; the next round drops it
                self.w = self.shadow.copy()
                self.buffer.restore([tuple(x) for x in b["buffer"]], self.job.partitions)
                self.buffer.dry = False
                self.start_batch()
            else:
                self.w = np.array(b["params"], dtype=np.float64)
                self.shadow = self.w.copy()
                self.buffer.clear()
                self.state = "restarting"
                self.job._down_since[self.id] = (self.job.loop.now, "restart")
                self._later(b.get("delay", 0.0), self.start_batch)

    def _install(self, topo: Topology, t: int) -> None:
        self.topo = topo
        self.counter = t
        self.stop_after = None
        self.versions.append(topo.version)
        self._results = {}

    def _on_ok(self, b: dict) -> None:
        topo = Topology.from_dict(b["topo"])
        if self.newcomer and self.topo is None:
            self.pending_topo = topo
            return
        self.pending = _PendingSwitch(topo, b["switch_t"], frozenset(b["leaving"]),
                                      tuple(b["newcomers"]), b["broadcaster"])

    def _on_model(self, b: dict) -> None:
        if self.topo is not None:
            return
        self.newcomer = False
        self._install(Topology.from_dict(b["topo"]), b["t"])
        self.w = np.array(b["params"], dtype=np.float64)
        self.shadow = self.w.copy()
        self.pending_topo = None
        self.start_batch()

    # -- data -------------------------------------------------------------------

    def _prefetch(self) -> None:
        while self.buffer.needs_fill() and self.leader is not None:
            self.buffer.requested += 1
            self.send_leader(Kind.SHARD_REQUEST, {"gen": self.gen})

    def _on_shard_reply(self, b: dict) -> None:
        if b["gen"] != self.gen:
            return
        self.buffer.requested = max(0, self.buffer.requested - 1)
        if "shard" in b:
            idx, off = b["shard"]
            self.buffer.fill(Shard(self.job.partitions[idx], off))
            self.data_epoch = b["epoch"]
        else:
            self.buffer.dry = True
        if self.state == "wait_data":
            self._gather()

    # -- mini-batch loop ----------------------------------------------------------

    def start_batch(self) -> None:
        if not self.alive:
            return
        if self.stop_after is not None and self.counter >= self.stop_after:
            self._finish()
            return
        down = self.job._down_since.pop(self.id, None)
        if down is not None:
            self.job.stall_log.append((self.id, down[0], self.job.loop.now, down[1]))
        self.state = "data"
        self.batch_ids = []
        self.batch_progress: dict = {}
        self.batch_start = self.job.loop.now
        self._results = {}
        self.buffer.dry = False
        self._need = self.local_batch()
        self._gather()

    def _gather(self) -> None:
        ids, recs, starved = self.buffer.take(self._need - len(self.batch_ids))
        self.batch_ids.extend(ids)
        for r in recs:
            self.batch_progress[r.partition] = r.next_sample_offset
        self._prefetch()
        if starved and not self.buffer.dry:
            self.state = "wait_data"
            return
        self.state = "compute"
        self._later(self.job.compute_time(len(self.batch_ids)), self._computed)

    def _computed(self) -> None:
        job = self.job
        X, y = job.dataset.samples(self.batch_ids)
        g, c = local_gradient(self.w, X.reshape(-1, len(self.w)), y, job.config.model)
        self._vec = np.append(g, float(c))
        self.state = "sync"
        if self.extra_delay > 0:
            self._later(self.extra_delay, self._announce)
        else:
            self._announce()

    def _announce(self) -> None:
        job = self.job
        bounds = job.tensor_bounds
        order = np.random.default_rng([job.config.seed, self.counter, _stable(self.id)]).permutation(len(bounds))
        for i, j in enumerate(order):
            lo, hi = bounds[j]
            body = {"t": self.counter, "v": self.topo.version, "name": f"g{j}", "len": hi - lo}
            if i == 0:
                body["progress"] = [[p, off] for p, off in self.batch_progress.items()]
            self.send_leader(Kind.TENSOR_READY, body)

    def _on_ready_to_reduce(self, b: dict) -> None:
        if self.topo is None or b["v"] != self.topo.version or b["t"] != self.counter:
            return
        if self.state != "sync":
            return
        if "stop" in b and b["stop"]:
            self.stop_after = self.counter + 1
        bounds = self.job.tensor_bounds
        for name in b["names"]:
            lo, hi = bounds[int(name[1:])]
            self.job._deposit(self, (self.counter, self.topo.version, name), self.topo,
                              self._vec[lo:hi])

    def collective_done(self, key, result: np.ndarray) -> None:
        if not self.alive or key[0] != self.counter or key[1] != self.topo.version:
            return
        self._results[key[2]] = result
        if len(self._results) < self.job.n_tensors:
            return
        total = np.concatenate([self._results[f"g{j}"] for j in range(self.job.n_tensors)])
        g, count = total[:-1], total[-1]
        if count > 0:
            self.w = sgd_step(self.w, g, count, eta_at(self.job.eta, self.counter))
        self.end_batch()

    def collective_failed(self, key, dead) -> None:
        if not self.alive or self.topo is None or key[0] != self.counter or key[1] != self.topo.version:
            return
        self.state = "faulted"
        self.send_leader(Kind.FAULT, {"t": key[0], "v": key[1], "dead": sorted(dead)})

    def end_batch(self) -> None:
        job = self.job
        t = self.counter
        job.log.append(LogRecord(t, self.id, self.rank, self.topo.version, self.data_epoch,
                                 list(self.batch_ids)))
        self.walls.append((t, self.batch_start, job.loop.now))
        job.commits.setdefault(self.id, []).append((t, job.loop.now))
        self.shadow = self.w.copy()
        decision = self.notify_batch_end()
        if self.lstate is not None:
            self.lstate.on_boundary()
            if self.lstate is not None and self.lstate.stop and self.stop_after == self.counter:
                job.finished = True
        if isinstance(decision, Exit):
            self._exit()
            return
        if isinstance(decision, SwitchTopology):
            self._switch(decision.topo)
            return
        self.start_batch()

    def notify_batch_end(self):
        """Advance the local counter and report what happens at this boundary."""
        self.counter += 1
        p = self.pending
        if p is not None and self.counter == p.switch_t:
            if self.id in p.leaving:
                return Exit()
            return SwitchTopology(p.topo)
        return Continue()

    def _switch(self, topo: Topology) -> None:
        p, self.pending = self.pending, None
        self.topo = topo
        self.versions.append(topo.version)
        self.job.event("worker_switch", self.id, t=self.counter, version=topo.version)
        if p.newcomers:
            if p.broadcaster == self.id:
                self._broadcast_model(p)
            self.state = "stalled"
            bt = self.job.broadcast_time()
            now = self.job.loop.now
            self.job.stall_log.append((self.id, now, now + bt, "broadcast"))
            self._later(bt, self.start_batch)
        else:
            self.start_batch()

    def _broadcast_model(self, p: _PendingSwitch) -> None:
        body = {"topo": p.topo.to_dict(), "t": self.counter, "params": [float(x) for x in self.w]}
        for n in p.newcomers:
            self.send(n, Kind.MODEL_BROADCAST, body)

    def _exit(self) -> None:
        job = self.job
        job.event("exit", self.id, t=self.counter)
        p = self.pending
        if p is not None and p.newcomers and p.broadcaster == self.id:
            self._broadcast_model(p)
        if self.lstate is not None:
            op, delay = self.handoff_ack
            meta = self.lstate.export()
            meta["ack"] = {"id": op["id"], "scheduler": op["scheduler"], "kind": op["kind"]}
            self.lstate.alive = False
            self.lstate = None
            self._refresh_token += 1
            self.handoff_meta = meta
            self.state = "handoff"
            if not self._next_ring_nonempty():
                self._finish_exit()
                job.finished = True
                return
            job.store.erase(job.job_handle, self.id)
            return
        self.send_leader(Kind.EXIT, {"t": self.counter})
        self._finish_exit()

    def _next_ring_nonempty(self) -> bool:
        meta = self.handoff_meta
        return bool(meta and Topology.from_dict(meta["topo"]).ring)

    def _finish_exit(self) -> None:
        self.state = "exited"
        self.alive = False
        self.token += 1
        self.job.fabric.disconnect(self.id)
        self.watch.close()

    def _finish(self) -> None:
        self.state = "done"
        self._refresh_token += 1


def _stable(s: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(s))


# ---------------------------------------------------------------------------
# job


class ElasticJob:
    """One elastic training job, its scheduler-facing API, and fault injection."""

    def __init__(self, config: Optional[RunConfig] = None, dataset=None,
                 job_handle: str = "job", eta=None, w0=None):
        self.config = cfg = config or RunConfig()
        self.job_handle = job_handle
        self.meta_key = f"{job_handle}/meta"
        self.loop = EventLoop()
        if cfg.backend == "tcp":
            from .sockets import SocketFabric
            self.fabric = SocketFabric(self.loop, bandwidth=cfg.bandwidth)
        else:
            self.fabric = InProcFabric(self.loop, bandwidth=cfg.bandwidth)
        from ..transport import LatencyProfile, LinkDelay
        self.fabric.inject_latency(LatencyProfile(default=LinkDelay(cfg.link_latency), seed=cfg.seed))
        self.store = LeaseStore(clock=self.loop.clock, ttl=cfg.lease_ttl)
        self.ckpt_store = CheckpointStore(cfg.checkpoint_path)
        if dataset is None:
            if cfg.dataset_manifest:
                dataset = FileDataset(cfg.dataset_manifest)
            else:
                dataset = SyntheticDataset(cfg.n_samples, cfg.n_features, seed=cfg.seed,
                                           task=cfg.model)
        self.dataset = dataset
        n = len(dataset)
        d = cfg.n_partitions or min(default_num_partitions(cfg.max_workers), n)
        self.partitions = make_partitions(n, d, getattr(dataset, "locator", "data"))
        self.n_features = dataset.n_features
        self.w0 = np.zeros(self.n_features) if w0 is None else np.array(w0, dtype=np.float64)
        self.eta = cfg.eta if eta is None else eta
        self.B = cfg.batch_size
        self.tensor_bounds = tensor_bounds(self.n_features, cfg.num_tensors)
        self.n_tensors = len(self.tensor_bounds)
        self.log = AssignmentLog(header={"n_features": self.n_features, "model": cfg.model,
                                         "num_tensors": self.n_tensors, "eta": cfg.eta,
                                         "B": cfg.batch_size, "seed": cfg.seed})
        self.workers: dict[str, Worker] = {}
        self.events: list[dict] = []
        self.stats: Counter = Counter()
        self.recoveries: list[RecoveryReport] = []
        self.commands: dict[int, CommandHandle] = {}
        self.boundary_times: dict[int, float] = {}
        self.commits: dict[str, list] = {}  # worker -> [(t, commit time)]
        self.stall_log: list[tuple] = []  # (worker, start, end, reason)
        self._down_since: dict[str, tuple] = {}
        self.lost_workers: set = set()
        self.finished = False
        self._rendezvous: dict = {}
        self._failed_keys: set = set()
        self._batch_hooks: dict = {}
        self._cmd_ids = 0
        self._started = False
        self.fabric.endpoint(SCHEDULER, self._on_scheduler)

    # -- model ------------------------------------------------------------------

    def new_pipeline(self) -> DataPipeline:
        return DataPipeline(self.partitions, seed=self.config.seed, auto_advance=False)

    def compute_time(self, n_samples: int) -> float:
        c = self.config
        return max(c.compute_floor, c.compute_fixed + c.compute_per_sample * n_samples)

    def broadcast_time(self) -> float:
        body = {"topo": {"version": 0, "ring": list(self.workers)}, "t": 0,
                "params": [float(x) for x in self.w0 + 0.1]}
        size = HEADER.size + len(Envelope.make(Kind.MODEL_BROADCAST, "", body).payload)
        return self.config.link_latency + size / self.config.bandwidth

    def event(self, kind: str, worker: Optional[str] = None, **kw) -> None:
        self.events.append({"time": self.loop.now, "kind": kind, "worker": worker, **kw})

    def _send(self, src: str, dst: str, kind: Kind, body=None) -> None:
        try:
            self.fabric.send(src, dst, Envelope.make(kind, src, body))
        except PeerGone:
            pass

    def _is_live(self, wid: str) -> bool:
        w = self.workers.get(wid)
        return w is not None and w.alive

    # -- lifecycle -------------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        ring = [f"w{i}" for i in range(self.config.n_workers)]
        self._boot(ring, 1, restart=False, ack=None, prep=self.config.context_prep)
        self._poll()

    def _boot(self, ring, version, restart, ack, prep) -> None:
        self.stats["context_preps"] += 1
        boot = {"ring": list(ring), "version": version, "restart": restart, "ack": ack}
        for wid in ring:
            w = Worker(self, wid, boot=boot)
            self.workers[wid] = w
            w.launch(prep)

    def launch(self, ids: Sequence[str]) -> None:
        """Start newcomers: context preparation plus background registration."""
        self.stats["context_preps"] += 1
        for wid in ids:
            w = Worker(self, wid)
            w.unreachable = wid in self._unreachable
            self.workers[wid] = w
            w.launch(self.config.context_prep)

    _unreachable: frozenset = frozenset()

    def relaunch(self, ring: Sequence[str], version: int, ack: Optional[dict]) -> None:
        """Stop every worker and restart ``ring`` from the latest checkpoint."""
        leader = self.store.leader(self.job_handle)
        for w in list(self.workers.values()):
            if w.alive:
                self._down_since[w.id] = (self.loop.now, "relaunch")
                w.die()
        if leader is not None:
            try:
                self.store.erase(self.job_handle, leader.address)
            except NotLeader:
                pass
        cfg = self.config
        self._boot(ring, version, restart=True, ack=ack,
                   prep=cfg.checkpoint_io + cfg.context_prep + cfg.checkpoint_io)

    def _poll(self) -> None:
        if self.finished:
            return
        self.store.poll_expiry()
        members = [w for w in self.workers.values()
                   if w.alive and (w.topo is not None or w.boot is not None)]
        if self._started and not members:
            for w in list(self.workers.values()):
                if w.alive:
                    self.kill(w.id, quiet=True)  # newcomers nobody will admit
            self._supervise()
        self.loop.call_later(self.store.poll_interval, self._poll)

    def _supervise(self) -> None:
        # every process of the job is gone: relaunch it on the same resources
        ring = self._last_ring or [f"w{i}" for i in range(self.config.n_workers)]
        self.event("relaunch", None, ring=ring)
        version = (self._last_version or 0) + 1
        self._last_ring = None
        self._boot(ring, version, restart=True, ack=None,
                   prep=self.config.context_prep + self.config.checkpoint_io)

    _last_ring: Optional[list] = None
    _last_version: Optional[int] = None

    def run(self, until: Optional[float] = None, batches: Optional[int] = None,
            stop: Optional[Callable[[], bool]] = None, max_steps: int = 5_000_000) -> "ElasticJob":
        self.start()

        def done():
            if self.finished:
                return True
            if batches is not None and self.t_cur >= batches:
                return True
            return stop is not None and stop()
        self.loop.run_until(until, stop=done, max_steps=max_steps)
        return self

    def run_until(self, pred: Callable[[], bool], limit: float = 1e6) -> None:
        self.start()
        self.loop.run_until(self.loop.now + limit, stop=lambda: pred() or self.finished)

    # -- introspection -----------------------------------------------------------------

    @property
    def leader(self) -> Optional[Worker]:
        for w in self.workers.values():
            if w.alive and w.lstate is not None:
                return w
        return None

    @property
    def leader_state(self) -> Optional[LeaderState]:
        w = self.leader
        return w.lstate if w else None

    @property
    def topology(self) -> Optional[Topology]:
        ls = self.leader_state
        return ls.topo if ls else None

    @property
    def t_cur(self) -> int:
        w = self.leader
        if w is not None:
            return w.counter
        live = [w.counter for w in self.workers.values() if w.alive and w.topo is not None]
        return max(live) if live else 0

    @property
    def live_workers(self) -> list[str]:
        return [wid for wid, w in self.workers.items() if w.alive]

    @property
    def params(self) -> np.ndarray:
        w = self.leader
        if w is None:
            w = next(w for w in self.workers.values() if w.w is not None)
        return w.w.copy()

    def consumed_by_epoch(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for r in self.log.records:
            out.setdefault(r.epoch, []).extend(r.samples)
        return out

    def stall_time(self, workers: Optional[Iterable[str]] = None,
                   t_from: int = 0, t_to: Optional[int] = None,
                   baseline: Optional[float] = None) -> float:
        """Time workers spent beyond their normal mini-batch pace.

        For each worker, sums ``max(0, gap - baseline)`` over the gaps between
        consecutive mini-batch commits for mini-batches in ``[t_from, t_to)``.
        The baseline defaults to the worker's median gap before ``t_from``.
        """
        workers = list(workers) if workers is not None else list(self.commits)
        total = 0.0
        for wid in workers:
            c = self.commits.get(wid, [])
            gaps = [(t1, b - a) for (t0, a), (t1, b) in zip(c, c[1:])]
            if not gaps:
                continue
            base = baseline
            if base is None:
                before = [g for t, g in gaps if t < t_from] or [g for _, g in gaps]
                base = median(before)
            total += sum(max(0.0, g - base) for t, g in gaps
                         if t >= t_from and (t_to is None or t < t_to))
        return total

    def stalled(self, workers: Optional[Iterable[str]] = None, since: float = 0.0,
                until: float = math.inf) -> float:
        """Instrumented stall: time workers sat blocked by a scaling or recovery action."""
        workers = None if workers is None else set(workers)
        return sum(max(0.0, min(e, until) - max(s, since)) for w, s, e, _ in self.stall_log
                   if workers is None or w in workers)

    def boundary_gaps(self, t_from: int, t_to: int) -> list[float]:
        bt = self.boundary_times
        return [bt[t + 1] - bt[t] for t in range(t_from, t_to) if t in bt and t + 1 in bt]

    def throughput(self, t_from: int, t_to: int) -> float:
        bt = self.boundary_times
        return self.B * (t_to - t_from) / (bt[t_to] - bt[t_from])

    # -- scheduler-facing API ---------------------------------------------------------

    def submit(self, kind: str, add: Sequence[str] = (), remove: Sequence[str] = (),
               **extra) -> CommandHandle:
        self.start()
        self._cmd_ids += 1
        body = {"id": self._cmd_ids, "kind": kind, "add": list(add), "remove": list(remove), **extra}
        h = CommandHandle(self._cmd_ids, kind, body, self.loop.now)
        self.commands[h.id] = h
        rec = self.store.leader(self.job_handle)
        if rec is None:
            h.status, h.done_at = "retry", self.loop.now
            return h
        self._send(SCHEDULER, rec.address, Kind.SCALE_CMD, body)
        return h

    def scale_out(self, add: Sequence[str], mode: str = "edl") -> CommandHandle:
        return self.submit("out", add=add, mode=mode)

    def scale_in(self, remove: Sequence[str], allowance: Optional[float] = None,
                 mode: str = "edl", teardown: bool = False) -> CommandHandle:
        extra = {"mode": mode}
        if allowance is not None:
            extra["allowance"] = allowance
        if teardown:
            extra["teardown"] = True
        return self.submit("in", remove=remove, **extra)

    def migrate(self, remove: Sequence[str], add: Sequence[str]) -> CommandHandle:
        return self.submit("migrate", add=add, remove=remove)

    def _on_scheduler(self, env: Envelope) -> None:
        b = env.body()
        h = self.commands.get(b["id"])
        if h is None or h.done:
            return
        h.done_at = self.loop.now
        if env.kind == Kind.RETRY:
            h.status = "retry"
        elif b.get("ok"):
            h.status = "ack"
        else:
            h.status, h.error = "error", b.get("error")

    def wait(self, h: CommandHandle, limit: float = 1e5) -> CommandHandle:
        self.run_until(lambda: h.done, limit)
        return h

    # -- profiling ------------------------------------------------------------------------

    def profile(self, min_p: Optional[int] = None, max_p: Optional[int] = None,
                per_level: int = 20, mode: str = "edl") -> ProfileReport:
        """Measure throughput per parallelism by scaling in one worker at a time.

        The job must currently run at ``max_p`` workers. Without a range only
        the current parallelism is measured. ``mode="stop_resume"`` relaunches
        the job at every level instead, for comparison.
        """
        self.start()
        self.run_until(lambda: self.leader_state is not None and self.leader_state.boot is None
                       and self.leader_state.topo is not None)
        p_now = len(self.topology)
        if min_p is None and max_p is None:
            min_p = max_p = p_now
        if min_p is None or max_p is None or not 1 <= min_p <= max_p:
            raise ValueError(f"invalid profiling range [{min_p}, {max_p}]")
        if p_now != max_p:
            raise ValueError(f"job runs {p_now} workers, profiling must start at {max_p}")
        ls = self.leader_state
        if ls.op is not None or ls.recovering:
            raise RetryLater("job is mid-scaling")
        before = Counter(self.stats)
        rows = []
        for p in range(max_p, min_p - 1, -1):
            start = self.t_cur + 1
            self.run_until(lambda: self.t_cur >= start + per_level)
            if self.finished:
                raise RuntimeError("job finished while profiling; raise epochs or max_batches")
            rows.append([p, self.throughput(start, start + per_level)])
            if p == min_p:
                break
            ring = list(self.topology.ring)
            lead = self.leader.id
            victim = next(w for w in reversed(ring) if w != lead)
            h = self.scale_in([victim], mode=mode)
            self.wait(h)
            if h.status != "ack":
                raise RetryLater(f"scale_in during profiling: {h.status} {h.error}")
            self.run_until(lambda: self.leader_state is not None and self.leader_state.boot is None
                           and self.topology is not None and len(self.topology) == p - 1)
        per_gpu = [thr / p for p, thr in rows]
        best = max(per_gpu)
        report = ProfileReport([(p, thr, g / best) for (p, thr), g in zip(rows, per_gpu)])
        report.scale_in_ops = self.stats["scale_in_ops"] - before["scale_in_ops"]
        report.scale_out_ops = self.stats["scale_out_ops"] - before["scale_out_ops"]
        report.context_preps = self.stats["context_preps"]
        return report

    # -- fault injection ----------------------------------------------------------------

    def kill(self, wid: str, quiet: bool = False) -> None:
        w = self.workers.get(wid)
        if w is None or not w.alive:
            return
        if w.topo is not None:
            self._last_ring = list(w.topo.ring)
            self._last_version = w.topo.version
        w.die()
        self.lost_workers.add(wid)
        if not quiet:
            self.event("kill", wid, t=w.counter)
        for key, c in list(self._rendezvous.items()):
            if wid in c.topo.ring:
                self._fail_collective(c, wid)

    def kill_at_batch(self, t: int, wid: str, fraction: float = 0.5) -> None:
        """Kill ``wid`` part-way through mini-batch ``t``."""
        def arm():
            p = len(self.topology) if self.topology else 1
            self.loop.call_later(fraction * self.compute_time(self.B // p), self.kill, wid)
        self.at_batch(t, arm)

    def at_batch(self, t: int, fn: Callable[[], None]) -> None:
        """Run ``fn`` when the leader passes the boundary that starts mini-batch ``t``."""
        if self._started and self.t_cur >= t and self.leader is not None:
            self.loop.call_soon(fn)
        else:
            self._batch_hooks.setdefault(t, []).append(fn)

    def delay_worker(self, wid: str, seconds: float) -> None:
        """Delay ``wid``'s gradient synchronization requests."""
        self.workers[wid].extra_delay = seconds

    def request_checkpoint(self) -> bool:
        """Ask the leader to checkpoint at its next mini-batch boundary."""
        ls = self.leader_state
        if ls is None:
            return False
        ls.ckpt_requested = True
        return True

    def make_unreachable(self, ids: Iterable[str]) -> None:
        self._unreachable = frozenset(ids)

    # -- collectives ----------------------------------------------------------------------

    def collective_time(self, length: int, n: int) -> float:
        if n <= 1:
            return 0.0
        c = self.config
        chunk = 8 * math.ceil(length / n) + HEADER.size
        return 2 * (n - 1) * (c.link_latency + chunk / c.bandwidth)

    def _deposit(self, worker: Worker, key, topo: Topology, segment: np.ndarray) -> None:
        if key in self._failed_keys:
            self.loop.call_soon(worker.collective_failed, key, [])
            return
        c = self._rendezvous.get(key)
        if c is None:
            c = self._rendezvous[key] = _Collective(key, topo)
        c.parts[worker.id] = np.array(segment, copy=True)
        dead = [w for w in topo.ring if not self._is_live(w)]
        if dead:
            self._fail_collective(c, dead[0])
            return
        if len(c.parts) == len(topo):
            results, _ = allreduce_group([c.parts[w] for w in topo.ring], topo, SUM)
            c.timer = self.loop.call_later(self.collective_time(len(segment), len(topo)),
                                           self._finish_collective, c, results)

    def _finish_collective(self, c: _Collective, results) -> None:
        self._rendezvous.pop(c.key, None)
        for w, res in zip(c.topo.ring, results):
            self.workers[w].collective_done(c.key, res)

    def _fail_collective(self, c: _Collective, dead: str) -> None:
        if c.timer is not None:
            c.timer.cancel()
        self._rendezvous.pop(c.key, None)
        self._failed_keys.add(c.key)
        for w in c.parts:
            if self._is_live(w):
                self.loop.call_soon(self.workers[w].collective_failed, c.key, [dead])
