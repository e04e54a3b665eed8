import numpy as np
import pytest

from elastictrain.allreduce import Topology, allreduce_group
from elastictrain.datapipeline import SyntheticDataset
from elastictrain.trainer import (LEAST_SQUARES, LOGISTIC, AssignmentLog, DimensionMismatch,
                                  LogCorrupt, LogRecord, ZeroCount, eta_at, local_gradient, loss,
                                  oracle_replay, sequential_sgd, sgd_step, tensor_bounds)


def test_gradient_by_hand():
    g, c = local_gradient(np.zeros(2), np.array([[1.0, 2.0]]), np.array([3.0]))
    assert g.tolist() == [-3.0, -6.0] and c == 1


def test_empty_batch():
    g, c = local_gradient(np.zeros(3), np.empty((0, 3)), np.empty(0))
    assert g.tolist() == [0.0, 0.0, 0.0] and c == 0


@pytest.mark.parametrize("model", [LEAST_SQUARES, LOGISTIC])
def test_gradient_matches_finite_differences(model):
    ds = SyntheticDataset(16, 4, seed=2, task=model)
    rng = np.random.default_rng(0)
    w = rng.normal(size=4) * 0.3
    g, c = local_gradient(w, ds.X, ds.y, model)
    h = 1e-6
    fd = np.array([(loss(w + h * e, ds.X, ds.y, model) - loss(w - h * e, ds.X, ds.y, model)) / (2 * h)
                   for e in np.eye(4)])
    np.testing.assert_allclose(g / c, fd, atol=1e-6)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        local_gradient(np.zeros(2), np.ones((1, 3)), np.ones(1))


def test_sgd_step_by_hand():
    assert sgd_step(np.array([1.0]), np.array([2.0]), 2, 0.1).tolist() == [0.9]
    w = np.array([0.3, -2.0])
    assert np.array_equal(sgd_step(w, np.zeros(2), 5, 0.1), w)
    with pytest.raises(ZeroCount):
        sgd_step(w, np.zeros(2), 0, 0.1)


def test_eta_schedule():
    assert eta_at(0.1, 3) == 0.1
    assert eta_at(lambda t: 1.0 / (t + 1), 3) == 0.25
    with pytest.raises(ValueError):
        eta_at(0.0, 0)


def test_three_worker_step_matches_single_process():
    ds = SyntheticDataset(96, 5, seed=4)
    w = np.zeros(5)
    parts = [list(range(0, 32)), list(range(32, 64)), list(range(64, 96))]
    vecs = []
    for ids in parts:
        g, c = local_gradient(w, *ds.samples(ids))
        vecs.append(np.append(g, c))
    out, _ = allreduce_group(vecs, Topology(1, ("a", "b", "c")))
    w_dist = sgd_step(w, out[0][:-1], out[0][-1], 0.05)
    log = AssignmentLog(header={"num_tensors": 1},
                        records=[LogRecord(0, f"w{r}", r, 1, 0, ids) for r, ids in enumerate(parts)])
    w_oracle = oracle_replay(log, ds, w, 0.05)
    assert w_dist.tobytes() == w_oracle.tobytes()
    w_seq = sequential_sgd(ds, [range(96)], w, 0.05)
    np.testing.assert_allclose(w_dist, w_seq, rtol=1e-12)


def test_oracle_empty_log_returns_initial():
    w0 = np.array([1.0, 2.0])
    assert oracle_replay(AssignmentLog(), SyntheticDataset(4, 2), w0).tolist() == [1.0, 2.0]


def test_oracle_rejects_gapped_ranks():
    log = AssignmentLog(records=[LogRecord(0, "a", 0, 1, 0, [0]), LogRecord(0, "b", 2, 1, 0, [1])])
    with pytest.raises(LogCorrupt):
        oracle_replay(log, SyntheticDataset(4, 2), np.zeros(2))


def test_log_roundtrip_and_corrupt(tmp_path):
    log = AssignmentLog(header={"num_tensors": 2},
                        records=[LogRecord(1, "w1", 1, 1, 0, [5, 6]), LogRecord(1, "w0", 0, 1, 0, [1])])
    p = tmp_path / "log.jsonl"
    log.dump(str(p))
    back = AssignmentLog.load(str(p))
    assert back.header == {"num_tensors": 2}
    assert [r.worker for r in back.records] == ["w0", "w1"]
    log.truncate(1)
    assert log.records == []
    p.write_text('{"t": 0, "worker": "x"}\n')
    with pytest.raises(LogCorrupt):
        AssignmentLog.load(str(p))


def test_tensor_bounds_cover_params_and_count():
    b = tensor_bounds(8, 2)
    assert b[0][0] == 0 and b[-1][1] == 9 and len(b) == 2
    assert len(tensor_bounds(1, 5)) == 2


def test_sequential_sgd_converges():
    ds = SyntheticDataset(2048, 8, seed=1)
    rng = np.random.default_rng(0)
    batches = [rng.choice(2048, 64, replace=False) for _ in range(200)]
    w = sequential_sgd(ds, batches, np.zeros(8), 0.1)
    assert loss(w, ds.X, ds.y) <= 0.01 * loss(np.zeros(8), ds.X, ds.y)
