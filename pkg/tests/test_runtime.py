from collections import Counter

import numpy as np
import pytest

from elastictrain.runtime.checkpoint import CheckpointStore, JobCheckpoint, NoCheckpoint
from elastictrain.runtime.config import APPROXIMATE, CONSISTENT, RunConfig, recovery_mode_from_env
from elastictrain.runtime.job import Continue, ElasticJob, Exit, SwitchTopology, _PendingSwitch
from elastictrain.trainer import loss, oracle_replay


def cfg(**kw):
    base = dict(n_workers=4, n_samples=2048, batch_size=64, epochs=2, seed=0)
    base.update(kw)
    return RunConfig(**base)


def exactly_once(job):
    n = len(job.dataset)
    ep = job.consumed_by_epoch()
    return bool(ep) and all(sorted(v) == list(range(n)) for v in ep.values())


def rel_err(job):
    c = job.config
    w = oracle_replay(job.log, job.dataset, job.w0, c.eta, c.model)
    return np.abs(w - job.params).max() / max(np.abs(w).max(), 1e-300)


def events(job, kind):
    return [e for e in job.events if e["kind"] == kind]


def batches_once(job):
    ts = Counter(r.t for r in job.log.records if r.rank == 0)
    return sorted(ts) == list(range(job.t_cur)) and set(ts.values()) == {1}


def test_static_run_finishes_and_is_bit_exact():
    job = ElasticJob(cfg()).run()
    assert job.finished
    assert exactly_once(job)
    assert job.t_cur == 2 * 2048 // 64
    w = oracle_replay(job.log, job.dataset, job.w0, job.config.eta)
    assert w.tobytes() == job.params.tobytes()


def test_leader_elected_and_batch_split():
    job = ElasticJob(cfg(batch_size=66)).run(batches=2)
    assert job.leader.id in job.topology.ring
    sizes = sorted(Counter(len(r.samples) for r in job.log.records if r.t == 0).items())
    assert sizes == [(16, 2), (17, 2)]


@pytest.mark.parametrize("T_b,k", [(0.25, 2), (0.8, 1)])
def test_switch_timestamp(T_b, k):
    job = ElasticJob(cfg(compute_fixed=T_b, compute_per_sample=0.0, epochs=4))
    job.run(batches=6)
    h = job.wait(job.scale_out(["w4"]))
    assert h.status == "ack"
    ev = events(job, "switch_scheduled")[0]
    assert ev["k"] == k
    assert ev["switch_t"] == ev["t_cur"] + k
    sw = events(job, "switch")[0]
    assert sw["t"] == ev["switch_t"] and len(sw["ring"]) == 5


def test_second_scale_command_gets_retry():
    job = ElasticJob(cfg())
    job.run(batches=3)
    h1 = job.scale_out(["w4"])
    h2 = job.scale_out(["w5"])
    job.wait(h2)
    assert h2.status == "retry"
    job.wait(h1)
    assert h1.status == "ack"
    job.run()
    assert exactly_once(job)


def test_scale_out_completes_and_matches_oracle():
    job = ElasticJob(cfg())
    job.run(batches=5)
    assert job.wait(job.scale_out(["w4"])).status == "ack"
    job.run()
    assert job.finished and exactly_once(job) and batches_once(job)
    assert len(job.topology) == 5
    assert rel_err(job) <= 1e-9
    assert job.stats["context_preps"] == 2


def test_unreachable_newcomer_aborts():
    job = ElasticJob(cfg(register_timeout=3.0))
    job.run(batches=3)
    job.make_unreachable(["w9"])
    h = job.wait(job.scale_out(["w9"]))
    assert h.status == "error" and h.error == "WorkerUnreachable"
    job.run()
    assert job.finished and len(job.topology) == 4 and exactly_once(job)


def test_scale_in_non_leader_no_stall():
    job = ElasticJob(cfg())
    job.run(batches=5)
    h = job.wait(job.scale_in(["w3"]))
    assert h.status == "ack"
    job.run()
    ev = events(job, "switch_scheduled")[0]
    (ex,) = events(job, "exit")
    assert ex["worker"] == "w3" and ex["t"] == ev["switch_t"]
    assert job.stalled(["w0", "w1", "w2"]) == 0.0
    assert exactly_once(job) and batches_once(job) and rel_err(job) <= 1e-9


def test_scale_in_leader_hands_off_state():
    job = ElasticJob(cfg())
    job.run(batches=5)
    old = job.leader.id
    h = job.wait(job.scale_in([old]))
    assert h.status == "ack"
    new = job.leader
    assert new.id != old and old not in job.topology.ring
    assert job.leader_state.B == 64
    job.run()
    assert job.finished and exactly_once(job) and batches_once(job)
    assert rel_err(job) <= 1e-9


def test_scale_in_to_one_worker():
    job = ElasticJob(cfg())
    job.run(batches=5)
    assert job.wait(job.scale_in(["w1", "w2", "w3"])).status == "ack"
    job.run()
    assert job.topology.ring == ("w0",)
    assert job.finished and exactly_once(job)


def test_migrate_switches_once():
    job = ElasticJob(cfg())
    job.run(batches=5)
    v0 = job.topology.version
    h = job.wait(job.migrate(["w0", "w1", "w2", "w3"], ["m0", "m1", "m2", "m3"]))
    assert h.status == "ack"
    job.run()
    assert job.topology.version == v0 + 1
    assert set(job.topology.ring) == {"m0", "m1", "m2", "m3"}
    assert exactly_once(job) and rel_err(job) <= 1e-9


def test_migrate_empty_is_noop_ack():
    job = ElasticJob(cfg())
    job.run(batches=3)
    v0 = job.topology.version
    assert job.wait(job.migrate([], [])).status == "ack"
    assert job.topology.version == v0


def test_migrate_while_scaling_retries():
    job = ElasticJob(cfg())
    job.run(batches=3)
    job.scale_out(["w4"])
    h = job.wait(job.migrate(["w1"], ["m1"]))
    assert h.status == "retry"


def test_notify_batch_end_transitions():
    job = ElasticJob(cfg())
    job.run(batches=3)
    w = job.workers["w2"]
    w.pending = None
    c = w.counter
    assert w.notify_batch_end() == Continue()
    topo = job.topology.next(["w0", "w1", "w3"])
    w.pending = _PendingSwitch(topo, c + 2, frozenset(), (), None)
    assert w.notify_batch_end() == SwitchTopology(topo)
    w.pending = _PendingSwitch(topo, c + 3, frozenset({"w2"}), (), None)
    assert w.notify_batch_end() == Exit()


@pytest.mark.parametrize("mode", [APPROXIMATE, CONSISTENT])
@pytest.mark.parametrize("victim", ["w2", "w0"])
def test_failure_recovery_keeps_exactly_once(mode, victim):
    job = ElasticJob(cfg(recovery=mode, checkpoint_every_batches=8))
    job.kill_at_batch(10, victim)
    job.run()
    (rep,) = job.recoveries
    assert rep.mode == mode and rep.dead == [victim]
    assert rep.leader_failed == (victim == "w0")
    assert rep.t == (10 if mode == APPROXIMATE else 8)
    assert job.finished and exactly_once(job) and batches_once(job)
    assert rel_err(job) <= 1e-9
    assert victim not in job.topology.ring


def test_single_worker_failure_without_checkpoint():
    job = ElasticJob(cfg(n_workers=1, n_samples=512, epochs=1, recovery=CONSISTENT))
    job.kill_at_batch(3, "w0")
    job.run()
    (rep,) = job.recoveries
    assert rep.no_checkpoint and rep.t == 0
    assert job.finished and exactly_once(job)


def test_failure_detected_within_liveness_window():
    job = ElasticJob(cfg(recovery=APPROXIMATE, liveness_window=1.0))
    job.run(batches=5)
    t_kill = job.loop.now
    job.kill("w3")
    job.run_until(lambda: bool(job.recoveries))
    T_b = job.compute_time(16)
    assert job.recoveries[0].time - t_kill <= 1.0 + 2 * T_b


def test_straggler_removed_when_enabled():
    job = ElasticJob(cfg(n_samples=8192, epochs=5, straggler_action="remove"))
    tb = job.compute_time(16)
    job.at_batch(20, lambda: job.delay_worker("w3", tb / 3))
    job.run(batches=80)
    (ev,) = events(job, "straggler")
    # delayed mini-batches are 20..29; the tenth one triggers the rule
    assert ev["worker"] == "w3" and ev["t"] == 29
    assert "w3" not in job.topology.ring


def test_straggler_advise_only_by_default():
    job = ElasticJob(cfg(n_samples=8192, epochs=5))
    tb = job.compute_time(16)
    job.at_batch(20, lambda: job.delay_worker("w3", tb / 3))
    job.run(batches=60)
    assert events(job, "straggler")
    assert "w3" in job.topology.ring


def test_profile_levels_and_ops():
    job = ElasticJob(cfg(n_workers=8, n_samples=4096, epochs=50))
    rep = job.profile(2, 8)
    assert [r[0] for r in rep.rows] == [8, 7, 6, 5, 4, 3, 2]
    assert rep.scale_in_ops == 6 and rep.scale_out_ops == 0 and rep.context_preps == 1
    effs = [r[2] for r in rep.rows]
    assert max(effs) == 1.0 and rep.best_p == 2
    assert all(0 < e <= 1 for e in effs)


def test_profile_single_level_and_current():
    job = ElasticJob(cfg(epochs=20))
    rep = job.profile(4, 4)
    assert len(rep.rows) == 1 and rep.scale_in_ops == 0
    job2 = ElasticJob(cfg(epochs=20))
    rep2 = job2.profile()
    assert [r[0] for r in rep2.rows] == [4]
    with pytest.raises(ValueError):
        ElasticJob(cfg(epochs=20)).profile(5, 3)


def test_convergence_with_scaling():
    c = cfg(n_samples=4096, epochs=4, eta=0.1)
    job = ElasticJob(c)
    job.at_batch(40, lambda: job.scale_out(["w4", "w5"]))
    job.at_batch(120, lambda: job.scale_in(["w1"]))
    job.run(batches=200)
    ds = job.dataset
    assert loss(job.params, ds.X, ds.y) <= 0.01 * loss(job.w0, ds.X, ds.y)
    assert rel_err(job) <= 1e-9


def test_tcp_backend_matches_inproc():
    a = ElasticJob(cfg(n_samples=512, epochs=1))
    a.run()
    b = ElasticJob(cfg(n_samples=512, epochs=1, backend="tcp"))
    try:
        b.run()
    finally:
        b.fabric.close()
    assert [r.to_json() for r in a.log.records] == [r.to_json() for r in b.log.records]
    assert a.params.tobytes() == b.params.tobytes()


def test_checkpoint_file_roundtrip(tmp_path):
    ck = JobCheckpoint(np.array([1.5, -2.0]), 7, 1, {"d": 4}, 64, {"seed": 3}, 12.5)
    path = str(tmp_path / "ck.json")
    ck.save(path)
    back = JobCheckpoint.load(path)
    assert back.params.tobytes() == ck.params.tobytes()
    assert (back.t, back.epoch, back.pipeline, back.B) == (7, 1, {"d": 4}, 64)
    store = CheckpointStore(str(tmp_path / "store.json"))
    with pytest.raises(NoCheckpoint):
        store.latest()
    store.write(ck)
    assert store.latest().t == 7


def test_recovery_mode_env(monkeypatch):
    monkeypatch.setenv("USE_APPX_RECOVERY", "1")
    assert recovery_mode_from_env() == APPROXIMATE
    assert RunConfig().recovery == APPROXIMATE
    monkeypatch.setenv("USE_APPX_RECOVERY", "0")
    assert recovery_mode_from_env() == CONSISTENT
    monkeypatch.delenv("USE_APPX_RECOVERY")
    assert RunConfig().recovery == CONSISTENT


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(recovery="bogus")
    with pytest.raises(ValueError):
        RunConfig(n_workers=8, batch_size=4)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"nope": 1})
    p = tmp_path / "c.json"
    p.write_text('{"n_workers": 2, "batch_size": 8}')
    assert RunConfig.load(str(p)).n_workers == 2
