"""Command line entry points.

    elastictrain run --config run.json --scenario events.json --out out/
    elastictrain sim --jobs 1000 --seed 3 --compare tiresias elastic-tiresias --out sim/
    elastictrain profile --config run.json --min-p 2 --max-p 8 --out prof/
    elastictrain gen-trace --jobs 1000 --seed 3 --out trace.csv
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from collections import Counter
from typing import Optional, Sequence

from .runtime.config import RunConfig
from .runtime.scenario import ScenarioInvalid, ScenarioRunner, load_scenario, validate_scenario
from .scheduler import overhead as oh
from .scheduler.policies import POLICIES, make_policy
from .scheduler.simulator import format_comparison, simulate, write_summary
from .scheduler.trace import TraceInvalid, generate_trace, read_trace, write_trace

log = logging.getLogger("elastictrain")


def _outdir(path: Optional[str]) -> str:
    path = path or "."
    os.makedirs(path, exist_ok=True)
    return path


def _dump(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "backend", None):
        d["backend"] = args.backend
    if getattr(args, "workers", None):
        d["n_workers"] = args.workers
    return RunConfig.from_dict(d)


# -- run ---------------------------------------------------------------------------


def coverage(job) -> dict:
    """Per-epoch exactly-once check over the assignment log.

    Complete epochs must consume every sample exactly once; the last epoch
    of a run stopped early only needs to be free of repeats.
    """
    n = len(job.dataset)
    out = {}
    by_epoch = job.consumed_by_epoch()
    last = max(by_epoch) if by_epoch else -1
    for e, ids in sorted(by_epoch.items()):
        c = Counter(ids)
        complete = len(ids) == n or e < last or job.finished
        if complete:
            ok = len(ids) == n and sorted(c) == list(range(n)) and max(c.values()) == 1
        else:
            ok = max(c.values()) == 1
        out[e] = {"samples": len(ids), "complete": complete, "pass": ok}
    return out


def write_run_artifacts(job, runner, out: str) -> dict:
    job.log.dump(os.path.join(out, "assignment_log.jsonl"))
    par = Counter(r.t for r in job.log.records)
    with open(os.path.join(out, "throughput.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "time_s", "parallelism", "throughput"])
        bt = job.boundary_times
        for t in sorted(bt):
            thr = ""
            if t - 1 in bt and bt[t] > bt[t - 1]:
                thr = f"{job.B / (bt[t] - bt[t - 1]):.6f}"
            w.writerow([t, f"{bt[t]:.6f}", par.get(t - 1, ""), thr])
    workers = sorted(job.commits)
    stall = {
        "per_worker": {wid: {"pace_stall_s": job.stall_time([wid]),
                             "blocked_s": job.stalled([wid])} for wid in workers},
        "total_blocked_s": job.stalled(),
        "events": [{"worker": w, "start": s, "end": e, "reason": r} for w, s, e, r in job.stall_log],
        "recoveries": [vars(r) for r in job.recoveries],
    }
    _dump(os.path.join(out, "stall_report.json"), stall)
    _dump(os.path.join(out, "final_model.json"),
          {"params": [float(x) for x in job.params], "t": job.t_cur})
    cov = coverage(job)
    summary = {
        "finished": job.finished, "t": job.t_cur, "time_s": job.loop.now,
        "workers": list(job.topology.ring) if job.topology else [],
        "coverage": {str(k): v for k, v in cov.items()},
        "coverage_pass": all(v["pass"] for v in cov.values()),
        "stats": dict(sorted(job.stats.items())),
        "skipped_commands": [[e, s, err] for e, s, err in runner.skipped],
    }
    _dump(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_run(args) -> int:
    from .runtime.job import ElasticJob
    try:
        cfg = _load_config(args)
        scenario = load_scenario(args.scenario, cfg.n_workers) if args.scenario else {"events": []}
    except (ScenarioInvalid, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = _outdir(args.out or cfg.output_dir)
    job = ElasticJob(cfg)
    runner = ScenarioRunner(job, scenario)
    runner.install()
    try:
        job.run(batches=cfg.max_batches)
    except Exception as e:  # noqa: BLE001 - reported as an unrecoverable fault
        print(f"error: run failed: {e}", file=sys.stderr)
        return 1
    finally:
        close = getattr(job.fabric, "close", None)
        if close is not None:
            close()
    summary = write_run_artifacts(job, runner, out)
    print(f"finished={summary['finished']} t={summary['t']} time={summary['time_s']:.3f}s "
          f"workers={len(summary['workers'])}")
    print(f"coverage: {'PASS' if summary['coverage_pass'] else 'FAIL'}")
    if not summary["finished"] and cfg.max_batches is None:
        print("error: job did not finish", file=sys.stderr)
        return 1
    return 0 if summary["coverage_pass"] else 1


# -- sim ---------------------------------------------------------------------------


def _overheads(args) -> oh.OverheadModel:
    if args.overheads == "custom":
        return oh.OverheadModel(args.scale_out_stall, args.scale_in_stall, args.newcomer_prep,
                                args.stop_resume, name="custom")
    return oh.preset(args.overheads)


def _trace(args):
    if args.trace:
        return read_trace(args.trace)
    return generate_trace(args.seed, args.jobs, mean_interarrival=args.interarrival)


def cmd_sim(args) -> int:
    try:
        trace = _trace(args)
    except TraceInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = _outdir(args.out)
    model = _overheads(args)
    names = args.compare or [args.policy]
    results = []
    for name in names:
        m = simulate(trace, make_policy(name), model, machines=args.machines,
                     gpus_per_machine=args.gpus_per_machine, until=args.until)
        m.write_series(os.path.join(out, f"series_{name}.csv"))
        m.write_jct(os.path.join(out, f"jct_{name}.csv"))
        results.append(m)
    write_summary(os.path.join(out, "summary.json"), results,
                  baseline=results[0] if len(results) > 1 else None)
    if len(results) > 1:
        print(format_comparison(results[0], results[1]))
    for m in results:
        s = m.summary()
        print(f"{m.policy}: mean JCT {s['mean_jct']:.1f}s, utilization {s['mean_utilization']:.3f}, "
              f"cluster efficiency {s['mean_cluster_efficiency']:.3f}")
    return 0


# -- profile -----------------------------------------------------------------------


def cmd_profile(args) -> int:
    from .runtime.job import ElasticJob
    try:
        cfg = _load_config(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    lo, hi = args.min_p, args.max_p
    if not 1 <= lo <= hi or hi > cfg.max_workers or hi > cfg.batch_size:
        print(f"error: invalid range [{lo}, {hi}] for capacity {cfg.max_workers}", file=sys.stderr)
        return 2
    need = (hi - lo + 1) * (args.per_level + 3) + 10
    per_epoch = max(1, cfg.n_samples // cfg.batch_size)
    d = cfg.to_dict()
    d.update(n_workers=hi, max_batches=None, epochs=max(cfg.epochs, math.ceil(need / per_epoch) + 1))
    cfg = RunConfig.from_dict(d)
    job = ElasticJob(cfg)
    report = job.profile(lo, hi, per_level=args.per_level, mode=args.mode)
    out = _outdir(args.out)
    report.to_csv(os.path.join(out, "profile.csv"))
    _dump(os.path.join(out, "profile_summary.json"),
          {"best_p": report.best_p, "scale_in_ops": report.scale_in_ops,
           "scale_out_ops": report.scale_out_ops, "context_preps": report.context_preps,
           "mode": args.mode})
    for p, thr, eff in report.rows:
        print(f"p={p:3d} throughput={thr:10.2f} efficiency={eff:.4f}")
    print(f"best p={report.best_p}; scale-in ops {report.scale_in_ops}, "
          f"scale-out ops {report.scale_out_ops}, context preps {report.context_preps}")
    return 0


# -- gen-trace ---------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    trace = generate_trace(args.seed, args.jobs, mean_interarrival=args.interarrival,
                           elastic_fraction=args.elastic_fraction)
    path = args.out or "trace.csv"
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    write_trace(trace, path)
    print(f"wrote {len(trace)} jobs to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastictrain", description=__doc__.splitlines()[0] or None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run an elastic training job under a scenario")
    r.add_argument("--config")
    r.add_argument("--scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--backend", choices=["inproc", "tcp"])
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sim", help="simulate cluster scheduling policies")
    s.add_argument("--trace", help="trace CSV (curve sidecar alongside)")
    s.add_argument("--jobs", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--interarrival", type=float, default=60.0)
    s.add_argument("--policy", choices=sorted(POLICIES), default="elastic-tiresias")
    s.add_argument("--compare", nargs=2, choices=sorted(POLICIES), metavar="POLICY")
    s.add_argument("--overheads", choices=sorted(oh.PRESETS) + ["custom"], default="edl")
    s.add_argument("--scale-out-stall", type=float, default=1.0)
    s.add_argument("--scale-in-stall", type=float, default=0.0)
    s.add_argument("--newcomer-prep", type=float, default=20.0)
    s.add_argument("--stop-resume", action="store_true")
    s.add_argument("--machines", type=int, default=8)
    s.add_argument("--gpus-per-machine", type=int, default=8)
    s.add_argument("--until", type=float)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sim)

    f = sub.add_parser("profile", help="measure throughput per parallelism")
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--min-p", type=int, required=True)
    f.add_argument("--max-p", type=int, required=True)
    f.add_argument("--per-level", type=int, default=20)
    f.add_argument("--mode", choices=["edl", "stop_resume"], default="edl")
    f.add_argument("--out")
    f.set_defaults(fn=cmd_profile)

    g = sub.add_parser("gen-trace", help="write a synthetic heavy-tailed job trace")
    g.add_argument("--jobs", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--interarrival", type=float, default=60.0)
    g.add_argument("--elastic-fraction", type=float, default=1.0)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_trace)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
