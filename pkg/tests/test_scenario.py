import json

import numpy as np
import pytest

from elastictrain.runtime.config import RunConfig
from elastictrain.runtime.scenario import (ScenarioInvalid, load_scenario, random_schedule,
                                           run_scenario, validate_scenario)


def sc(*events):
    return {"events": list(events)}


def test_valid_scenario_passes():
    validate_scenario(sc({"batch": 50, "action": "scale_out", "n": 1},
                         {"batch": 120, "action": "scale_in", "n": 1}), n_workers=4)


@pytest.mark.parametrize("bad", [
    sc({"batch": 1, "action": "explode"}),
    sc({"action": "kill", "worker": "w1"}),
    sc({"batch": 1, "time": 2.0, "action": "kill", "worker": "w1"}),
    sc({"batch": 5, "action": "kill", "worker": "w1"}, {"batch": 3, "action": "kill", "worker": "w2"}),
    sc({"batch": -1, "action": "checkpoint"}),
    {"events": "nope"},
])
def test_syntax_errors(bad):
    with pytest.raises(ScenarioInvalid):
        validate_scenario(bad)


@pytest.mark.parametrize("bad", [
    sc({"batch": 3, "action": "kill", "worker": "w9"}),
    sc({"batch": 3, "action": "scale_in", "remove": ["w1"]}, {"batch": 4, "action": "kill", "worker": "w1"}),
    sc({"batch": 3, "action": "scale_out", "add": ["w2"]}),
    sc({"batch": 3, "action": "scale_in", "n": 4}),
    sc({"batch": 3, "action": "migrate", "remove": ["w0"], "add": []}),
    sc({"batch": 3, "action": "scale_out"}),
])
def test_membership_errors(bad):
    with pytest.raises(ScenarioInvalid):
        validate_scenario(bad, n_workers=4)


def test_scale_out_n_names_continue_numbering():
    validate_scenario(sc({"batch": 3, "action": "scale_out", "n": 2},
                         {"batch": 5, "action": "kill", "worker": "w5"}), n_workers=4)


def test_load_scenario_errors(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioInvalid):
        load_scenario(str(p))
    with pytest.raises(ScenarioInvalid):
        load_scenario(str(tmp_path / "missing.json"))
    p.write_text(json.dumps(sc({"batch": 2, "action": "kill", "worker": "w1"})))
    assert load_scenario(str(p), 4)["events"][0]["worker"] == "w1"


def test_run_scenario_with_n_forms_and_checkpoint():
    cfg = RunConfig(n_workers=4, n_samples=2048, batch_size=64, epochs=2, checkpoint_every_batches=10**6)
    job, runner = run_scenario(cfg, sc({"batch": 10, "action": "scale_out", "n": 1},
                                       {"batch": 20, "action": "checkpoint"},
                                       {"batch": 30, "action": "scale_in", "n": 1}))
    assert job.finished and not runner.skipped
    assert [e["t"] for e in job.events if e["kind"] == "checkpoint"] == [21]
    switches = [e for e in job.events if e["kind"] == "switch"]
    assert len(switches[0]["ring"]) == 5 and "w4" in switches[0]["ring"]
    assert len(switches[1]["ring"]) == 4 and job.leader.id in switches[1]["ring"]


def test_time_triggered_and_straggle_events():
    cfg = RunConfig(n_workers=4, n_samples=2048, batch_size=64, epochs=2)
    job, _ = run_scenario(cfg, sc({"time": 3.0, "action": "kill", "worker": "w2"},
                                  {"time": 3.5, "action": "straggle", "worker": "w1", "delay": 0.01}))
    assert job.finished and job.recoveries[0].dead == ["w2"]


def test_random_schedule_deterministic():
    a = random_schedule(np.random.default_rng(5), 8, 4, 40)
    b = random_schedule(np.random.default_rng(5), 8, 4, 40)
    assert a == b
    validate_scenario(a)
