"""Deterministic discrete-event kernel, broadcast network and run loop.

All time is simulated.  Message delays and planning durations are drawn from
seeded generators, so a scenario plus a seed fully determines the event log.
"""

from __future__ import annotations

import enum
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .geometry import BoundaryBox
from .planner import PlannerConfig
from .trajectory import DynamicLimits, Trajectory, count_stops, smoothness_integrals

__all__ = [
    "EventKind",
    "Event",
    "EventQueue",
    "DelayModel",
    "DelayStats",
    "PlanDurationModel",
    "Scenario",
    "AgentSpec",
    "RunMetrics",
    "AgentMetrics",
    "Simulation",
    "DeadlockError",
    "run",
]


class EventKind(enum.IntEnum):
    # Value doubles as the priority among events at the same instant: a message
    # landing exactly when a phase ends is seen by that phase.
    MESSAGE_DELIVERY = 0
    PLAN_COMPLETE = 1
    PHASE_TIMER = 2
    METRIC_SAMPLE = 3


@dataclass(frozen=True)
class Event:
    fire_time: float
    sequence: int
    kind: EventKind
    agent: int
    payload: object = None


class EventQueue:
    """Min-heap ordered by (fire_time, kind priority, insertion sequence)."""

    def __init__(self) -> None:
        self._heap: list = []
        self._seq = 0

    def push(self, fire_time: float, kind: EventKind, agent: int = -1, payload=None) -> Event:
        ev = Event(float(fire_time), self._seq, kind, agent, payload)
        heapq.heappush(self._heap, (ev.fire_time, int(kind), ev.sequence, ev))
        self._seq += 1
        return ev

    def pop(self) -> Event:
        return heapq.heappop(self._heap)[3]

    def peek_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def __len__(self) -> int:
        return len(self._heap)

    def pending(self, kinds) -> bool:
        return any(item[3].kind in kinds for item in self._heap)


class DelayModel:
    """Per-message delay: fixed floor plus bounded jitter.

    ``jitter`` is ``{"kind": "none"}``, ``{"kind": "uniform", "a": lo, "b": hi}``
    or ``{"kind": "exponential", "mean": m, "cap": c}`` (all seconds).
    """

    def __init__(self, delta_introd: float = 0.0, jitter: dict | None = None, seed: int = 0) -> None:
        if delta_introd < 0:
            raise ValueError("delta_introd must be non-negative")
        self.delta_introd = float(delta_introd)
        self.jitter = dict(jitter or {"kind": "none"})
        kind = self.jitter.get("kind", "none")
        if kind == "uniform":
            a, b = float(self.jitter["a"]), float(self.jitter["b"])
            if not 0 <= a <= b:
                raise ValueError("uniform jitter needs 0 <= a <= b")
        elif kind == "exponential":
            if not (float(self.jitter["mean"]) > 0 and math.isfinite(float(self.jitter["cap"]))):
                raise ValueError("exponential jitter needs a positive mean and a finite cap")
        elif kind != "none":
            raise ValueError(f"unknown jitter kind {kind!r}")
        self.kind = kind
        self.rng = np.random.default_rng(seed)

    @property
    def jitter_cap(self) -> float:
        if self.kind == "uniform":
            return float(self.jitter["b"])
        if self.kind == "exponential":
            return float(self.jitter["cap"])
        return 0.0

    @property
    def delta_max(self) -> float:
        return self.delta_introd + self.jitter_cap

    def sample(self) -> float:
        if self.kind == "uniform":
            j = self.rng.uniform(float(self.jitter["a"]), float(self.jitter["b"]))
        elif self.kind == "exponential":
            j = min(self.rng.exponential(float(self.jitter["mean"])), float(self.jitter["cap"]))
        else:
            j = 0.0
        return self.delta_introd + float(j)

    def quantile(self, q: float) -> float:
        """Analytic quantile of the configured delay distribution, ``q`` in [0, 1]."""
        if self.kind == "uniform":
            a, b = float(self.jitter["a"]), float(self.jitter["b"])
            return self.delta_introd + a + q * (b - a)
        if self.kind == "exponential":
            mean, cap = float(self.jitter["mean"]), float(self.jitter["cap"])
            j = math.inf if q >= 1 else -mean * math.log1p(-q)
            return self.delta_introd + min(j, cap)
        return self.delta_introd


@dataclass
class DelayStats:
    delays: list = field(default_factory=list)

    def record(self, d: float) -> None:
        self.delays.append(d)

    @property
    def count(self) -> int:
        return len(self.delays)

    @property
    def max(self) -> float:
        return max(self.delays) if self.delays else 0.0

    @property
    def min(self) -> float:
        return min(self.delays) if self.delays else 0.0

    def percentile(self, p: float) -> float:
        if not self.delays:
            raise ValueError("no recorded delays")
        return float(np.percentile(self.delays, p))

    def histogram(self, bin_width: float = 0.005) -> tuple[np.ndarray, np.ndarray]:
        if not self.delays:
            return np.zeros(0, dtype=int), np.zeros(1)
        edges = bin_width * np.arange(int(np.floor(self.max / bin_width)) + 2)
        counts, edges = np.histogram(self.delays, bins=edges)
        return counts, edges


class PlanDurationModel:
    """Simulated optimization time: ``{"kind": "constant", "value": s}`` or
    ``{"kind": "uniform", "low": s, "high": s}``."""

    def __init__(self, spec: dict | None = None, seed: int = 0) -> None:
        self.spec = dict(spec or {"kind": "uniform", "low": 0.015, "high": 0.060})
        kind = self.spec.get("kind")
        if kind == "constant":
            if not float(self.spec["value"]) > 0:
                raise ValueError("plan duration must be positive")
        elif kind == "uniform":
            if not 0 < float(self.spec["low"]) <= float(self.spec["high"]):
                raise ValueError("uniform plan duration needs 0 < low <= high")
        else:
            raise ValueError(f"unknown plan duration kind {kind!r}")
        self.kind = kind
        self.rng = np.random.default_rng(seed)

    @property
    def max(self) -> float:
        return float(self.spec["value"] if self.kind == "constant" else self.spec["high"])

    def sample(self) -> float:
        if self.kind == "constant":
            return float(self.spec["value"])
        return float(self.rng.uniform(float(self.spec["low"]), float(self.spec["high"])))


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    start: tuple
    goal: tuple
    start_time: float | None = None

    def to_dict(self) -> dict:
        d = {"start": list(self.start), "goal": list(self.goal)}
        if self.start_time is not None:
            d["start_time"] = self.start_time
        return d


@dataclass(frozen=True)
class Scenario:
    agents: tuple
    mode: str = "rmader"
    delta_dc: float = 0.0
    delay: dict = field(default_factory=lambda: {"delta_introd": 0.0, "jitter": {"kind": "none"}})
    plan_duration: dict = field(default_factory=lambda: {"kind": "uniform", "low": 0.015, "high": 0.060})
    limits: DynamicLimits = field(default_factory=DynamicLimits)
    box: BoundaryBox = field(default_factory=BoundaryBox)
    seed: int = 0
    horizon: float = 30.0
    sample_dt: float = 0.01
    stagger: float = 0.25
    check_duration: float = 0.005
    recheck_duration: float = 0.001
    budget: float | None = None
    max_commits: int | None = None
    goal_tolerance: float = 0.15
    goal_speed: float = 0.05
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self) -> None:
        if self.mode not in ("mader", "rmader"):
            raise ValueError("mode must be 'mader' or 'rmader'")
        if self.delta_dc < 0:
            raise ValueError("delta_dc must be non-negative")
        if not self.sample_dt > 0 or not self.horizon > 0:
            raise ValueError("sample_dt and horizon must be positive")

    def start_time(self, i: int) -> float:
        st = self.agents[i].start_time
        return i * self.stagger if st is None else float(st)

    def to_dict(self) -> dict:
        return {
            "agents": [a.to_dict() for a in self.agents],
            "mode": self.mode,
            "delta_dc": self.delta_dc,
            "delay": self.delay,
            "plan_duration": self.plan_duration,
            "limits": self.limits.to_dict(),
            "box": list(self.box.half_extents),
            "seed": self.seed,
            "horizon": self.horizon,
            "sample_dt": self.sample_dt,
            "stagger": self.stagger,
            "check_duration": self.check_duration,
            "recheck_duration": self.recheck_duration,
            "budget": self.budget,
            "max_commits": self.max_commits,
            "goal_tolerance": self.goal_tolerance,
            "goal_speed": self.goal_speed,
            "planner": self.planner.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        agents = tuple(
            AgentSpec(tuple(map(float, a["start"])), tuple(map(float, a["goal"])), a.get("start_time"))
            for a in data.pop("agents")
        )
        if "limits" in data:
            data["limits"] = DynamicLimits(**data["limits"])
        if "box" in data:
            data["box"] = BoundaryBox(tuple(map(float, data["box"])))
        if "planner" in data:
            data["planner"] = PlannerConfig.from_dict(data["planner"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(agents=agents, **data)

    def with_(self, **changes) -> "Scenario":
        from dataclasses import replace

        return replace(self, **changes)

    def delay_model(self, seed: int) -> DelayModel:
        return DelayModel(self.delay.get("delta_introd", 0.0), self.delay.get("jitter"), seed)

    def latency_budget(self) -> float:
        """Time between iteration start and the switch to the new trajectory."""
        if self.budget is not None:
            return float(self.budget)
        plan_max = PlanDurationModel(self.plan_duration).max
        tail = self.check_duration + (self.delta_dc if self.mode == "rmader" else self.recheck_duration)
        return 1.5 * (plan_max + tail)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class AgentMetrics:
    agent: int
    reached: bool
    travel_time: float
    stops: int
    accel_integral: float
    jerk_integral: float
    commits: int
    discards: int


@dataclass
class RunMetrics:
    collisions: int
    colliding_pairs: list
    agents: list
    delays: DelayStats
    end_time: float
    all_reached: bool
    delta_introd: float
    delta_max: float

    @property
    def collided(self) -> bool:
        return self.collisions > 0

    def mean(self, attr: str) -> float:
        vals = [getattr(a, attr) for a in self.agents]
        return float(np.mean(vals)) if vals else 0.0


class DeadlockError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


class Simulation:
    """Owns the event queue, network, agents and the ground-truth monitor."""

    MONITOR_BLOCK = 0.25

    def __init__(self, scenario: Scenario, log: io.TextIOBase | None = None) -> None:
        from .protocol import Agent, AgentConfig

        self.scenario = scenario
        self.now = 0.0
        self.queue = EventQueue()
        ss = np.random.SeedSequence(scenario.seed)
        delay_seed, plan_seed = ss.spawn(2)
        self.delay_model = scenario.delay_model(np.random.default_rng(delay_seed).integers(2**63))
        self.plan_seeds = np.random.default_rng(plan_seed).integers(2**63, size=len(scenario.agents))
        self.delay_stats = DelayStats()
        self._log = log
        budget = scenario.latency_budget()
        self.agents = []
        for i, spec in enumerate(scenario.agents):
            cfg = AgentConfig(
                mode=scenario.mode,
                delta_dc=scenario.delta_dc,
                box=scenario.box,
                limits=scenario.limits,
                goal=np.asarray(spec.goal, dtype=float),
                budget=budget,
                check_duration=scenario.check_duration,
                recheck_duration=scenario.recheck_duration,
                max_commits=scenario.max_commits,
                goal_tolerance=scenario.goal_tolerance,
                planner=scenario.planner,
            )
            durations = PlanDurationModel(scenario.plan_duration, int(self.plan_seeds[i]))
            self.agents.append(Agent(i, np.asarray(spec.start, dtype=float), cfg, self, durations))
        n = len(self.agents)
        self.reached_at = [None] * n
        self.colliding_pairs: set = set()
        self._monitored_until = -math.inf
        self._grid_index = 0

    # -- kernel services used by agents -----------------------------------
    def schedule(self, t: float, kind: EventKind, agent: int, payload=None) -> Event:
        if t < self.now:
            raise ValueError("cannot schedule in the past")
        return self.queue.push(t, kind, agent, payload)

    def broadcast(self, sender: int, msg) -> None:
        for agent in self.agents:
            if agent.id == sender:
                continue
            d = self.delay_model.sample()
            self.delay_stats.record(d)
            self.queue.push(self.now + d, EventKind.MESSAGE_DELIVERY, agent.id, msg)

    def log(self, agent: int, event: str, payload: dict) -> None:
        if self._log is None:
            return
        rec = {"t": round(self.now, 9), "agent": agent, "event": event, "payload": payload}
        self._log.write(json.dumps(rec, sort_keys=True) + "\n")

    # -- monitor ----------------------------------------------------------
    def _monitor_to(self, t: float) -> bool:
        """Sample executed positions on the grid up to ``t``; True if all reached."""
        dt = self.scenario.sample_dt
        k_end = int(math.floor(t / dt + 1e-9))
        if k_end < self._grid_index:
            return all(r is not None for r in self.reached_at)
        times = dt * np.arange(self._grid_index, k_end + 1)
        self._grid_index = k_end + 1
        pos = np.stack([a.executed.positions(times) for a in self.agents])  # (n, T, 3)
        box2 = self.scenario.box.pairwise
        n = len(self.agents)
        for i, j in combinations(range(n), 2):
            if (i, j) in self.colliding_pairs:
                continue
            delta = np.abs(pos[i] - pos[j])
            if np.any(np.all(delta < box2, axis=1)):
                self.colliding_pairs.add((i, j))
        speed_dt = 1e-3
        for i, agent in enumerate(self.agents):
            if self.reached_at[i] is not None:
                continue
            d = np.linalg.norm(pos[i] - agent.config.goal, axis=1)
            near = np.flatnonzero(d < self.scenario.goal_tolerance)
            if not near.size:
                continue
            # Backward difference: positions at or before now never change.
            earlier = agent.executed.positions(np.maximum(times[near] - speed_dt, 0.0))
            v = np.linalg.norm(pos[i][near] - earlier, axis=1) / speed_dt
            ok = near[v < self.scenario.goal_speed]
            if ok.size:
                self.reached_at[i] = float(times[ok[0]])
        return all(r is not None for r in self.reached_at)

    # -- main loop --------------------------------------------------------
    def run(self, until: float | None = None) -> RunMetrics:
        sc = self.scenario
        horizon = sc.horizon if until is None else until
        for agent in self.agents:
            agent.startup(sc.start_time(agent.id))
        self.queue.push(0.0, EventKind.METRIC_SAMPLE)
        finished = False
        while self.queue:
            ev = self.queue.pop()
            if ev.fire_time > horizon:
                self.now = horizon
                break
            self.now = ev.fire_time
            if ev.kind == EventKind.METRIC_SAMPLE:
                if self._monitor_to(self.now):
                    finished = True
                    break
                self._check_deadlock()
                self.queue.push(self.now + self.MONITOR_BLOCK, EventKind.METRIC_SAMPLE)
                continue
            agent = self.agents[ev.agent]
            if ev.kind == EventKind.MESSAGE_DELIVERY:
                agent.on_message(ev.payload)
            elif ev.kind == EventKind.PLAN_COMPLETE:
                agent.on_plan_complete(ev.payload)
            else:
                agent.on_timer(ev.payload)
        if not finished:
            self._monitor_to(self.now)
        return self._metrics()

    def _check_deadlock(self) -> None:
        if any(a.active for a in self.agents):
            return
        if self.queue.pending((EventKind.MESSAGE_DELIVERY, EventKind.PLAN_COMPLETE, EventKind.PHASE_TIMER)):
            return
        for i, a in enumerate(self.agents):
            if self.reached_at[i] is None and self.now > a.executed.t_end + 1.0:
                raise DeadlockError("deadlocked scenario")

    def _metrics(self) -> RunMetrics:
        sc = self.scenario
        per_agent = []
        for i, a in enumerate(self.agents):
            t0 = sc.start_time(i)
            reached = self.reached_at[i] is not None
            t_end = self.reached_at[i] if reached else self.now
            executed = a.executed
            smooth = smoothness_integrals(executed)
            stops = count_stops(executed, dt=sc.sample_dt) if len(executed.segments) > 1 else 0
            per_agent.append(
                AgentMetrics(
                    agent=i,
                    reached=reached,
                    travel_time=max(0.0, t_end - t0),
                    stops=stops,
                    accel_integral=smooth["accel_integral"],
                    jerk_integral=smooth["jerk_integral"],
                    commits=a.commits,
                    discards=a.discards,
                )
            )
        pairs = sorted(self.colliding_pairs)
        return RunMetrics(
            collisions=len(pairs),
            colliding_pairs=pairs,
            agents=per_agent,
            delays=self.delay_stats,
            end_time=self.now,
            all_reached=all(r is not None for r in self.reached_at),
            delta_introd=self.delay_model.delta_introd,
            delta_max=self.delay_model.delta_max,
        )


def run(scenario: Scenario, until: float | None = None, log: io.TextIOBase | None = None) -> RunMetrics:
    return Simulation(scenario, log).run(until)
