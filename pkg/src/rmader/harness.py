"""Batch experiments, scripted two-agent cases and report files.

An experiment is a sweep over mode x injected delay x delay-check length.
Every cell runs the same list of derived seeds, so two modes are always
compared on identical delay and planning-duration draws.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .netsim import AgentSpec, DelayModel, RunMetrics, Scenario, run

__all__ = [
    "ExperimentSpec",
    "CellSpec",
    "RunRow",
    "Report",
    "CaseResult",
    "circle_agents",
    "derive_seeds",
    "resolve_delta_dc",
    "run_experiment",
    "emit_report",
    "calibrate",
    "table3_case",
    "run_case",
    "deconfliction_stages",
    "TABLE3_CASES",
    "RUN_COLUMNS",
    "CELL_COLUMNS",
    "DELAY_COLUMNS",
]

DELAY_BIN = 0.005
DC_MARGIN = 0.005

RUN_COLUMNS = [
    "cell",
    "mode",
    "delta_introd",
    "delta_dc",
    "run",
    "seed",
    "status",
    "error",
    "collided",
    "collisions",
    "colliding_pairs",
    "all_reached",
    "travel_time",
    "travel_time_max",
    "stops",
    "accel_integral",
    "jerk_integral",
    "commits",
    "discards",
    "messages",
    "delay_min",
    "delay_max",
    "end_time",
]

CELL_COLUMNS = [
    "cell",
    "mode",
    "delta_introd",
    "delta_dc",
    "status",
    "runs",
    "failed_runs",
    "collision_pct",
    "collisions",
    "stops_avg",
    "accel_integral_avg",
    "jerk_integral_avg",
    "travel_time_avg",
    "travel_time_max",
    "delay_max",
    "delta_max",
]

DELAY_COLUMNS = ["cell", "bin_lo", "bin_hi", "count"]


def circle_agents(n_agents: int, radius: float = 10.0, altitude: float = 1.0) -> tuple[AgentSpec, ...]:
    """Agents at equal angles on a circle, each flying to the antipodal point."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    out = []
    for i in range(n_agents):
        th = 2.0 * math.pi * i / n_agents
        c, s = radius * math.cos(th), radius * math.sin(th)
        out.append(AgentSpec((c, s, altitude), (-c, -s, altitude)))
    return tuple(out)


def derive_seeds(base_seed: int, runs: int) -> list[int]:
    """One 32-bit seed per run index, independent of mode and cell."""
    return [int(np.random.SeedSequence([base_seed, k]).generate_state(1)[0]) for k in range(runs)]


_PCT = re.compile(r"^\s*(>)?\s*(\d+(?:\.\d+)?)\s*(?:st|nd|rd|th)?\s*$")


def resolve_delta_dc(
    spec,
    delays=None,
    model: DelayModel | None = None,
    delta_introd: float | None = None,
    margin: float = DC_MARGIN,
) -> float:
    """Delay-check length from a sweep entry.

    ``spec`` is seconds (number), ``{"offset": s}`` relative to the injected
    delay, ``"75th"`` for a percentile of the delay distribution, or
    ``">100th"`` for the worst case plus ``margin``.  Percentiles come from
    ``delays`` when given, otherwise from the analytic quantile of ``model``.
    """
    if isinstance(spec, bool):
        raise ValueError(f"bad delta_dc spec {spec!r}")
    if isinstance(spec, (int, float)):
        if spec < 0:
            raise ValueError("delta_dc must be non-negative")
        return float(spec)
    if isinstance(spec, dict):
        if set(spec) != {"offset"}:
            raise ValueError(f"bad delta_dc spec {spec!r}")
        base = delta_introd if delta_introd is not None else (model.delta_introd if model else None)
        if base is None:
            raise ValueError("relative delta_dc needs the injected delay")
        return float(base) + float(spec["offset"])
    m = _PCT.match(str(spec))
    if m is None:
        raise ValueError(f"bad delta_dc spec {spec!r}")
    beyond, q = m.group(1) is not None, float(m.group(2))
    if not 0.0 <= q <= 100.0:
        raise ValueError("percentile must be in [0, 100]")
    have_data = delays is not None and len(delays) > 0
    if not have_data and model is None:
        raise ValueError("percentile delta_dc needs calibration data")
    if beyond:
        worst = model.delta_max if model is not None else float(np.max(delays))
        return worst + margin
    if have_data:
        return float(np.percentile(np.asarray(delays, dtype=float), q))
    return model.quantile(q / 100.0)


@dataclass(frozen=True)
class ExperimentSpec:
    """Sweep definition.

    ``generator`` is ``{"kind": "circle", "n_agents", "radius", "altitude"}``
    or ``{"kind": "file", "path"}`` naming a scenario JSON whose agents are
    reused.  ``scenario`` holds overrides for every other scenario field.
    """

    generator: dict = field(default_factory=lambda: {"kind": "circle", "n_agents": 10, "radius": 10.0, "altitude": 1.0})
    modes: tuple = ("rmader", "mader")
    delta_introd: tuple = (0.0, 0.05, 0.1)
    delta_dc: tuple = ({"offset": 0.035},)
    jitter: dict = field(default_factory=lambda: {"kind": "uniform", "a": 0.0, "b": 0.03})
    runs: int = 100
    base_seed: int = 0
    scenario: dict = field(default_factory=dict)
    log_events: bool = False

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ValueError("runs per cell must be >= 1")
        for m in self.modes:
            if m not in ("mader", "rmader"):
                raise ValueError(f"unknown mode {m!r}")
        if any(d < 0 for d in self.delta_introd):
            raise ValueError("delta_introd values must be non-negative")
        kind = self.generator.get("kind")
        if kind not in ("circle", "file"):
            raise ValueError("generator kind must be 'circle' or 'file'")
        bad = {"agents", "mode", "delta_dc", "delay", "seed"} & set(self.scenario)
        if bad:
            raise ValueError(f"scenario overrides may not set {sorted(bad)}")

    def to_dict(self) -> dict:
        return {
            "generator": dict(self.generator),
            "modes": list(self.modes),
            "delta_introd": list(self.delta_introd),
            "delta_dc": list(self.delta_dc),
            "jitter": dict(self.jitter),
            "runs": self.runs,
            "base_seed": self.base_seed,
            "scenario": dict(self.scenario),
            "log_events": self.log_events,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if "spec" in data and "seeds" in data:
            data = data["spec"]  # a manifest
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        data = dict(data)
        for key in ("modes", "delta_introd", "delta_dc"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def agents(self) -> tuple[AgentSpec, ...]:
        g = self.generator
        if g["kind"] == "circle":
            return circle_agents(int(g.get("n_agents", 10)), float(g.get("radius", 10.0)), float(g.get("altitude", 1.0)))
        with open(g["path"]) as fh:
            return Scenario.from_dict(json.load(fh)).agents

    def base_scenario(self) -> Scenario:
        data = {"agents": [a.to_dict() for a in self.agents()], **self.scenario}
        return Scenario.from_dict(data)

    def cells(self) -> list["CellSpec"]:
        base = self.base_scenario()
        out = []
        for mode, di, dc_spec in product(self.modes, self.delta_introd, self.delta_dc):
            model = DelayModel(di, self.jitter)
            dc = resolve_delta_dc(dc_spec, model=model, delta_introd=di)
            sc = base.with_(mode=mode, delta_dc=dc, delay={"delta_introd": float(di), "jitter": dict(self.jitter)})
            name = f"{mode}-i{_ms(di)}-dc{_ms(dc)}"
            out.append(CellSpec(name, mode, float(di), dc, sc))
        return out


def _ms(x: float) -> str:
    return f"{x * 1000:g}"


@dataclass(frozen=True)
class CellSpec:
    name: str
    mode: str
    delta_introd: float
    delta_dc: float
    scenario: Scenario


@dataclass
class RunRow:
    values: dict
    delay_counts: list

    @property
    def ok(self) -> bool:
        return self.values["status"] == "ok"


@dataclass
class Report:
    spec: ExperimentSpec
    seeds: list
    cells: list
    runs: list
    cell_rows: list = field(default_factory=list)
    delay_rows: list = field(default_factory=list)

    @property
    def errored(self) -> bool:
        return any(not r.ok for r in self.runs)

    def rows(self) -> list[dict]:
        return [r.values for r in self.runs]


def _delay_counts(delays) -> list[int]:
    d = np.asarray(delays, dtype=float)
    if d.size == 0:
        return []
    idx = np.floor(d / DELAY_BIN + 1e-9).astype(np.int64)
    return np.bincount(idx).tolist()


def _run_row(cell: CellSpec, k: int, seed: int, m: RunMetrics) -> RunRow:
    ag = m.agents
    d = m.delays.delays
    values = {
        "cell": cell.name,
        "mode": cell.mode,
        "delta_introd": cell.delta_introd,
        "delta_dc": cell.delta_dc,
        "run": k,
        "seed": seed,
        "status": "ok",
        "error": "",
        "collided": int(m.collided),
        "collisions": m.collisions,
        "colliding_pairs": ";".join(f"{a}-{b}" for a, b in m.colliding_pairs),
        "all_reached": int(m.all_reached),
        "travel_time": m.mean("travel_time"),
        "travel_time_max": max((a.travel_time for a in ag), default=0.0),
        "stops": m.mean("stops"),
        "accel_integral": m.mean("accel_integral"),
        "jerk_integral": m.mean("jerk_integral"),
        "commits": sum(a.commits for a in ag),
        "discards": sum(a.discards for a in ag),
        "messages": len(d),
        "delay_min": min(d) if d else 0.0,
        "delay_max": max(d) if d else 0.0,
        "end_time": m.end_time,
    }
    return RunRow(values, _delay_counts(d))


def _error_row(cell: CellSpec, k: int, seed: int, exc: BaseException) -> RunRow:
    values = {c: "" for c in RUN_COLUMNS}
    values.update(
        cell=cell.name,
        mode=cell.mode,
        delta_introd=cell.delta_introd,
        delta_dc=cell.delta_dc,
        run=k,
        seed=seed,
        status="error",
        error=f"{type(exc).__name__}: {exc}",
    )
    return RunRow(values, [])


def _execute(job) -> tuple[RunRow, str | None]:
    cell, k, seed, want_log = job
    log = io.StringIO() if want_log else None
    try:
        m = run(cell.scenario.with_(seed=seed), log=log)
    except Exception as exc:  # recorded, never fatal for the experiment
        return _error_row(cell, k, seed, exc), None
    return _run_row(cell, k, seed, m), (log.getvalue() if log is not None else None)


def _aggregate(cell: CellSpec, rows: list[RunRow]) -> dict:
    ok = [r.values for r in rows if r.ok]
    failed = len(rows) - len(ok)

    def avg(key):
        return float(np.mean([v[key] for v in ok])) if ok else ""

    def mx(key):
        return float(np.max([v[key] for v in ok])) if ok else ""

    return {
        "cell": cell.name,
        "mode": cell.mode,
        "delta_introd": cell.delta_introd,
        "delta_dc": cell.delta_dc,
        "status": "error" if failed else "ok",
        "runs": len(ok),
        "failed_runs": failed,
        "collision_pct": 100.0 * sum(v["collided"] for v in ok) / len(ok) if ok else "",
        "collisions": sum(v["collisions"] for v in ok),
        "stops_avg": avg("stops"),
        "accel_integral_avg": avg("accel_integral"),
        "jerk_integral_avg": avg("jerk_integral"),
        "travel_time_avg": avg("travel_time"),
        "travel_time_max": mx("travel_time_max"),
        "delay_max": mx("delay_max"),
        "delta_max": cell.scenario.delay_model(0).delta_max,
    }


def _delay_rows(cell: CellSpec, rows: list[RunRow]) -> list[dict]:
    total: list[int] = []
    for r in rows:
        for i, c in enumerate(r.delay_counts):
            if i >= len(total):
                total.extend([0] * (i + 1 - len(total)))
            total[i] += c
    return [
        {"cell": cell.name, "bin_lo": round(i * DELAY_BIN, 9), "bin_hi": round((i + 1) * DELAY_BIN, 9), "count": c}
        for i, c in enumerate(total)
        if c
    ]


def run_experiment(spec: ExperimentSpec, parallel: int = 1, log_dir=None) -> Report:
    """Run every cell x seed.  Run errors become failure rows, never exceptions.

    Event logs are written to ``log_dir`` (one JSON-lines file per run) when
    the spec asks for them and a directory is given.
    """
    cells = spec.cells()
    seeds = derive_seeds(spec.base_seed, spec.runs)
    want_log = spec.log_events and log_dir is not None
    jobs = [(cell, k, seed, want_log) for cell in cells for k, seed in enumerate(seeds)]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_execute, jobs, chunksize=1))
    else:
        results = [_execute(j) for j in jobs]
    if want_log:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        for (cell, k, _, _), (_, text) in zip(jobs, results):
            if text is not None:
                (log_dir / f"{cell.name}-run{k:03d}.jsonl").write_text(text)
    rows = [r for r, _ in results]
    report = Report(spec, seeds, cells, rows)
    per = len(seeds)
    for i, cell in enumerate(cells):
        chunk = rows[i * per : (i + 1) * per]
        report.cell_rows.append(_aggregate(cell, chunk))
        report.delay_rows.extend(_delay_rows(cell, chunk))
    return report


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _versions() -> dict:
    import numba

    from . import __version__

    return {
        "rmader": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
    }


def emit_report(report: Report, out_dir) -> dict[str, Path]:
    """Write runs.csv, cells.csv, delays.csv and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    paths = {name: out / name for name in ("runs.csv", "cells.csv", "delays.csv", "manifest.json")}
    _write_csv(paths["runs.csv"], RUN_COLUMNS, report.rows())
    _write_csv(paths["cells.csv"], CELL_COLUMNS, report.cell_rows)
    _write_csv(paths["delays.csv"], DELAY_COLUMNS, report.delay_rows)
    manifest = {
        "spec": report.spec.to_dict(),
        "seeds": report.seeds,
        "cells": [c.name for c in report.cells],
        "errored_runs": sum(not r.ok for r in report.runs),
        "versions": _versions(),
    }
    paths["manifest.json"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def calibrate(spec: ExperimentSpec, runs: int | None = None, quantiles=(50, 75, 90, 95, 99, 100)) -> list[dict]:
    """Measure delay percentiles for each injected delay of ``spec``.

    Uses the first mode and the first few seeds; delays do not depend on
    the protocol, only on how many messages get sent.
    """
    n = min(spec.runs, 3) if runs is None else runs
    seeds = derive_seeds(spec.base_seed, n)
    base = spec.base_scenario()
    out = []
    for di in spec.delta_introd:
        model = DelayModel(di, spec.jitter)
        sc = base.with_(
            mode=spec.modes[0],
            delta_dc=model.delta_max + DC_MARGIN,
            delay={"delta_introd": float(di), "jitter": dict(spec.jitter)},
        )
        delays: list[float] = []
        for s in seeds:
            delays.extend(run(sc.with_(seed=s)).delays.delays)
        row = {"delta_introd": float(di), "messages": len(delays), "delta_max": model.delta_max}
        for q in quantiles:
            row[f"p{q:g}"] = float(np.percentile(delays, q)) if delays else float("nan")
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# scripted two-agent cases
# ---------------------------------------------------------------------------

# Agent A crosses along x, agent B along y; both stop after one commit.  The
# start times place the arrival of A's trajectory at B in a chosen phase of
# B's first iteration (with 30 ms planning, 5 ms check, 50 ms delay).
TABLE3_CASES = {
    1: {"phase": "optimization", "rmader": (0.0, 0.07), "mader": (0.0, 0.07), "rmader_stage": ("C_B",), "mader_collides": False},
    2: {"phase": "check", "rmader": (0.0, 0.053), "mader": (0.0, 0.053), "rmader_stage": ("DC_B",), "mader_collides": False},
    3: {"phase": "delay_check", "rmader": (0.0, 0.04), "mader": (0.0, 0.0505), "rmader_stage": ("DC_B",), "mader_collides": True},
    4: {"phase": "next_iteration", "rmader": (0.02, 0.0), "mader": (0.0, 0.04), "rmader_stage": ("C_A", "DC_A"), "mader_collides": True},
}

_STAGE_CODE = {"optimization": "O", "check": "C", "delay_check": "DC", "recheck": "R", "commit": "commit"}


def _case_number(name) -> int:
    if isinstance(name, int):
        n = name
    else:
        m = re.fullmatch(r"(?:table3-)?case(\d)", str(name))
        if m is None:
            raise ValueError(f"unknown case {name!r}")
        n = int(m.group(1))
    if n not in TABLE3_CASES:
        raise ValueError(f"unknown case {name!r}")
    return n


def table3_case(name, mode: str) -> Scenario:
    """Scenario for one of the four scripted delivery-timing cases."""
    n = _case_number(name)
    if mode not in ("mader", "rmader"):
        raise ValueError("mode must be 'mader' or 'rmader'")
    s_a, s_b = TABLE3_CASES[n][mode]
    agents = (
        AgentSpec((-4.0, 0.0, 1.0), (4.0, 0.0, 1.0), s_a),
        AgentSpec((0.0, -4.0, 1.0), (0.0, 4.0, 1.0), s_b),
    )
    return Scenario(
        agents=agents,
        mode=mode,
        delta_dc=0.06,
        delay={"delta_introd": 0.05, "jitter": {"kind": "none"}},
        plan_duration={"kind": "constant", "value": 0.03},
        seed=0,
        horizon=8.0,
        budget=0.3,
        max_commits=1,
    )


def deconfliction_stages(log_text: str) -> list[str]:
    """Stages at which candidates were dropped because of a conflict, e.g. ``DC_B``."""
    out = []
    for line in log_text.splitlines():
        ev = json.loads(line)
        if ev["event"] != "discard" or ev["payload"].get("reason") == "stale":
            continue
        code = _STAGE_CODE.get(ev["payload"]["stage"], ev["payload"]["stage"])
        out.append(f"{code}_{'AB'[ev['agent']] if ev['agent'] < 2 else ev['agent']}")
    return out


@dataclass
class CaseResult:
    case: int
    mode: str
    collided: bool
    stages: list
    metrics: RunMetrics
    log: str

    @property
    def expected_collision(self) -> bool:
        return self.mode == "mader" and TABLE3_CASES[self.case]["mader_collides"]

    @property
    def matches_table(self) -> bool:
        if self.collided != self.expected_collision:
            return False
        if self.mode == "rmader":
            want = TABLE3_CASES[self.case]["rmader_stage"]
            return bool(self.stages) and self.stages[0] in want
        return True

    def summary(self) -> dict:
        return {
            "case": self.case,
            "mode": self.mode,
            "collided": self.collided,
            "colliding_pairs": [list(p) for p in self.metrics.colliding_pairs],
            "deconfliction_stages": self.stages,
            "expected_collision": self.expected_collision,
            "matches_table": self.matches_table,
            "all_reached": self.metrics.all_reached,
        }


def run_case(name, mode: str) -> CaseResult:
    sc = table3_case(name, mode)
    buf = io.StringIO()
    m = run(sc, log=buf)
    text = buf.getvalue()
    return CaseResult(_case_number(name), mode, m.collided, deconfliction_stages(text), m, text)

