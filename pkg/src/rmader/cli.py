"""Command line entry point: ``rmader run | case | calibrate``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .harness import TABLE3_CASES, ExperimentSpec, calibrate, emit_report, run_case, run_experiment


def _cmd_run(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, base_seed=args.seed)
    if args.logs:
        spec = dataclasses.replace(spec, log_events=True)
    out = Path(args.out)
    report = run_experiment(spec, parallel=args.parallel, log_dir=out / "logs")
    emit_report(report, out)
    for row in report.cell_rows:
        print(
            f"{row['cell']}: runs={row['runs']} failed={row['failed_runs']} "
            f"collision%={row['collision_pct']} travel={row['travel_time_avg']}"
        )
    bad = sum(not r.ok for r in report.runs)
    if bad:
        print(f"{bad} run(s) errored; see {out / 'runs.csv'}", file=sys.stderr)
    return 1 if bad else 0


def _cmd_case(args) -> int:
    try:
        res = run_case(args.name, args.mode)
    except Exception as exc:
        print(f"case failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.log:
        Path(args.log).write_text(res.log)
    print(json.dumps(res.summary(), indent=2))
    return 0


def _cmd_calibrate(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    try:
        rows = calibrate(spec, runs=args.runs)
    except Exception as exc:
        print(f"calibration failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(rows, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmader", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment sweep and write CSV reports")
    r.add_argument("--spec", required=True, help="experiment JSON (or a manifest.json from an earlier run)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the base seed")
    r.add_argument("--parallel", type=int, default=1, help="worker processes")
    r.add_argument("--logs", action="store_true", help="write one JSON-lines event log per run")
    r.set_defaults(func=_cmd_run)

    names = [f"table3-case{n}" for n in TABLE3_CASES]
    c = sub.add_parser("case", help="run one scripted two-agent timing case")
    c.add_argument("--name", required=True, choices=names)
    c.add_argument("--mode", required=True, choices=["mader", "rmader"])
    c.add_argument("--log", default=None, help="write the event log here")
    c.set_defaults(func=_cmd_case)

    k = sub.add_parser("calibrate", help="measure delay percentiles for a spec")
    k.add_argument("--spec", required=True)
    k.add_argument("--runs", type=int, default=None, help="seeds per injected delay (default min(runs, 3))")
    k.set_defaults(func=_cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
