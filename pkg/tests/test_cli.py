import csv
import json

import pytest

from elastictrain.cli import main


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def run_config(tmp_path):
    return write_json(tmp_path / "run.json", {"n_workers": 4, "batch_size": 32, "n_samples": 1024,
                                              "epochs": 4, "seed": 1})


def test_run_with_scaling(tmp_path, run_config, capsys):
    sc = write_json(tmp_path / "sc.json", {"events": [
        {"batch": 10, "action": "scale_out", "n": 2},
        {"batch": 30, "action": "scale_in", "n": 3}]})
    out = tmp_path / "out"
    assert main(["run", "--config", run_config, "--scenario", sc, "--out", str(out)]) == 0
    assert "coverage: PASS" in capsys.readouterr().out
    for name in ("assignment_log.jsonl", "throughput.csv", "stall_report.json",
                 "final_model.json", "summary.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["finished"] and summary["coverage_pass"]
    assert len(summary["workers"]) == 3
    with open(out / "throughput.csv") as f:
        rows = list(csv.DictReader(f))
    assert {r["parallelism"] for r in rows} >= {"4", "6", "3"}


def test_run_empty_scenario(tmp_path, run_config):
    sc = write_json(tmp_path / "sc.json", {"events": []})
    assert main(["run", "--config", run_config, "--scenario", sc, "--out", str(tmp_path / "o")]) == 0


def test_run_unknown_worker_rejected(tmp_path, run_config, capsys):
    sc = write_json(tmp_path / "sc.json", {"events": [{"batch": 5, "action": "scale_in",
                                                       "remove": ["w9"]}]})
    assert main(["run", "--config", run_config, "--scenario", sc, "--out", str(tmp_path / "o")]) == 2
    assert "w9" in capsys.readouterr().err


def test_run_bad_config(tmp_path):
    cfg = write_json(tmp_path / "run.json", {"n_workers": 4, "bogus": 1})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_sim_compare(tmp_path, capsys):
    args = ["sim", "--jobs", "150", "--seed", "3", "--machines", "4",
            "--compare", "tiresias", "elastic-tiresias"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    text = capsys.readouterr().out
    assert "Reduction (%)" in text
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("summary.json", "series_tiresias.csv", "jct_elastic-tiresias.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sim_unknown_policy():
    with pytest.raises(SystemExit) as e:
        main(["sim", "--policy", "sjf"])
    assert e.value.code == 2


def test_sim_from_trace_file(tmp_path, capsys):
    trace = str(tmp_path / "t.csv")
    assert main(["gen-trace", "--jobs", "40", "--seed", "2", "--out", trace]) == 0
    assert (tmp_path / "t.curves.json").exists()
    assert main(["sim", "--trace", trace, "--policy", "static", "--machines", "2",
                 "--out", str(tmp_path / "s")]) == 0
    assert "static: mean JCT" in capsys.readouterr().out
    (tmp_path / "t.csv").write_text("nope\n")
    assert main(["sim", "--trace", trace, "--out", str(tmp_path / "s")]) == 2


def test_profile_range(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["profile", "--min-p", "2", "--max-p", "8", "--per-level", "5",
                 "--out", str(out)]) == 0
    with open(out / "profile.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 7
    effs = [float(r[next(k for k in r if k.startswith("eff"))]) for r in rows]
    assert max(effs) == pytest.approx(1.0)
    summ = json.loads((out / "profile_summary.json").read_text())
    assert summ["scale_in_ops"] == 6 and summ["scale_out_ops"] == 0


def test_profile_single_level(tmp_path):
    out = tmp_path / "p"
    assert main(["profile", "--min-p", "4", "--max-p", "4", "--per-level", "5",
                 "--out", str(out)]) == 0
    assert len((out / "profile.csv").read_text().strip().splitlines()) == 2


def test_profile_invalid_range(tmp_path):
    assert main(["profile", "--min-p", "0", "--max-p", "4", "--out", str(tmp_path)]) == 2
    assert main(["profile", "--min-p", "5", "--max-p", "4", "--out", str(tmp_path)]) == 2
    assert main(["profile", "--min-p", "2", "--max-p", "99", "--out", str(tmp_path)]) == 2


def test_gen_trace_deterministic(tmp_path):
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    main(["gen-trace", "--jobs", "30", "--seed", "7", "--out", a])
    main(["gen-trace", "--jobs", "30", "--seed", "7", "--out", b])
    assert open(a).read() == open(b).read()
    assert open(a).readline().startswith("job_id,submit_time_s")
