"""Per-agent deconfliction state machine (MADER and RMADER modes).

An iteration runs Optimization -> Check -> Recheck (MADER) or
Optimization -> Check -> Delay Check (RMADER).  The agent keeps flying its
committed trajectory throughout; a successful iteration splices the candidate
onto the committed trajectory at the switch time.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryBox, check_pair_collision
from .planner import Infeasible, PlannerConfig, make_request, plan
from .trajectory import DynamicLimits, Trajectory, constant_trajectory

__all__ = [
    "AgentPhase",
    "MessageKind",
    "Message",
    "StoreEntry",
    "TrajectoryStore",
    "AgentConfig",
    "Agent",
    "trajectory_digest",
    "conflicts",
]


class AgentPhase(str, enum.Enum):
    IDLE = "idle"
    OPTIMIZING = "optimizing"
    CHECKING = "checking"
    DELAY_CHECKING = "delay_checking"
    RECHECKING = "rechecking"


class MessageKind(str, enum.Enum):
    NEW = "new"
    COMMITTED = "committed"


@dataclass(frozen=True)
class Message:
    sender: int
    kind: MessageKind
    trajectory: Trajectory
    t_send: float


def trajectory_digest(traj: Trajectory) -> str:
    blob = json.dumps(traj.to_dict(), separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StoreEntry:
    committed: Trajectory | None = None
    pending_new: Trajectory | None = None
    last_send: float = -math.inf


class TrajectoryStore:
    """Last committed and pending new trajectory of every known peer."""

    def __init__(self) -> None:
        self.entries: dict[int, StoreEntry] = {}

    def apply(self, msg: Message) -> bool:
        """Store ``msg``; returns False when it is older than what we hold."""
        entry = self.entries.setdefault(msg.sender, StoreEntry())
        if msg.t_send < entry.last_send:
            return False
        entry.last_send = msg.t_send
        if msg.kind == MessageKind.NEW:
            entry.pending_new = msg.trajectory
        else:
            entry.committed = msg.trajectory
            entry.pending_new = None
        return True

    def trajectories(self) -> list[tuple[int, Trajectory]]:
        """Every trajectory a peer might fly, in peer order."""
        out = []
        for peer in sorted(self.entries):
            e = self.entries[peer]
            if e.committed is not None:
                out.append((peer, e.committed))
            if e.pending_new is not None:
                out.append((peer, e.pending_new))
        return out

    def __contains__(self, peer: int) -> bool:
        return peer in self.entries


def conflicts(candidate: Trajectory, other: Trajectory, box: BoundaryBox) -> bool:
    """Conservative check of ``candidate`` against ``other`` from the later start on."""
    ws = max(candidate.t_start, other.t_start)
    return check_pair_collision(candidate, other, box, (ws, math.inf))


@dataclass(frozen=True)
class AgentConfig:
    mode: str = "rmader"
    delta_dc: float = 0.0
    box: BoundaryBox = field(default_factory=BoundaryBox)
    limits: DynamicLimits = field(default_factory=DynamicLimits)
    goal: np.ndarray = field(default_factory=lambda: np.zeros(3))
    budget: float = 0.2
    check_duration: float = 0.005
    recheck_duration: float = 0.001
    max_commits: int | None = None
    goal_tolerance: float = 0.15
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self) -> None:
        if self.mode not in ("mader", "rmader"):
            raise ValueError("mode must be 'mader' or 'rmader'")
        if self.delta_dc < 0:
            raise ValueError("delta_dc must be non-negative")
        if not self.budget > 0:
            raise ValueError("budget must be positive")


@dataclass
class _Iteration:
    token: int
    t_switch: float
    candidate: Trajectory | None = None
    check_ok: bool = False
    arrivals_at_check: int = 0
    arrivals_at_recheck: int = 0


class Agent:
    """One agent driven by the simulation kernel.

    The kernel must provide ``now``, ``schedule(t, kind, agent, payload)``,
    ``broadcast(sender, msg)`` and ``log(agent, event, payload)``.
    """

    def __init__(self, agent_id: int, start, config: AgentConfig, kernel, durations) -> None:
        self.id = agent_id
        self.config = config
        self.kernel = kernel
        self.durations = durations
        self.committed = constant_trajectory(np.asarray(start, dtype=float), 0.0)
        self.store = TrajectoryStore()
        self.phase = AgentPhase.IDLE
        self.phase_since = 0.0
        self.active = True
        self.commits = 0
        self.discards = 0
        self.arrivals = 0
        self._token = 0
        self._it: _Iteration | None = None

    # The executed trajectory is the committed one; history is never dropped.
    @property
    def executed(self) -> Trajectory:
        return self.committed

    # -- helpers ----------------------------------------------------------
    def _set_phase(self, phase: AgentPhase) -> None:
        self.phase = phase
        self.phase_since = self.kernel.now
        self.kernel.log(self.id, "phase", {"phase": phase.value})

    def _send(self, kind: MessageKind, traj: Trajectory) -> None:
        now = self.kernel.now
        out = traj.trim_before(now)
        self.kernel.log(self.id, "broadcast", {"kind": kind.value, "digest": trajectory_digest(out)})
        self.kernel.broadcast(self.id, Message(self.id, kind, out, now))

    def _timer(self, t: float, tag: str) -> None:
        from .netsim import EventKind

        self.kernel.schedule(t, EventKind.PHASE_TIMER, self.id, (tag, self._token))

    def _conflict_with_store(self, candidate: Trajectory) -> bool:
        box = self.config.box
        return any(conflicts(candidate, traj, box) for _, traj in self.store.trajectories())

    def _discard(self, stage: str, reason: str, restart_at: float | None = None) -> None:
        self.discards += 1
        self.kernel.log(self.id, "discard", {"stage": stage, "reason": reason})
        self._it = None
        self._token += 1
        self._set_phase(AgentPhase.IDLE)
        self._timer(self.kernel.now if restart_at is None else restart_at, "iterate")

    # -- kernel entry points ----------------------------------------------
    def startup(self, t_start: float) -> None:
        """Announce the initial hover and schedule the first iteration."""
        self._send(MessageKind.COMMITTED, self.committed)
        self._timer(t_start, "iterate")

    def on_timer(self, payload) -> None:
        tag, token = payload
        if token != self._token:
            return
        if tag == "iterate":
            self.on_iteration_start()
        elif tag == "check_done":
            self._end_check()
        elif tag == "recheck_done":
            self._end_recheck()
        elif tag == "delay_check_done":
            self._end_delay_check()
        else:
            raise ValueError(f"unknown timer {tag!r}")

    def on_iteration_start(self) -> None:
        from .netsim import EventKind

        cfg = self.config
        if not self.active:
            return
        done_goal = np.linalg.norm(self.committed.terminal_hold - cfg.goal) <= 0.5 * cfg.goal_tolerance
        done_commits = cfg.max_commits is not None and self.commits >= cfg.max_commits
        if done_goal or done_commits:
            self.active = False
            self.kernel.log(self.id, "done", {"reason": "goal" if done_goal else "max_commits"})
            return
        now = self.kernel.now
        self._token += 1
        t_switch = now + cfg.budget
        self._it = _Iteration(self._token, t_switch)
        self._set_phase(AgentPhase.OPTIMIZING)
        start = self.committed.evaluate(t_switch)
        req = make_request(
            start, cfg.goal, cfg.limits, self.store.trajectories(), cfg.box, cfg.planner, reference=self.committed
        )
        result = plan(req, cfg.planner)
        self.kernel.schedule(now + self.durations.sample(), EventKind.PLAN_COMPLETE, self.id, (self._token, result))

    def on_plan_complete(self, payload) -> None:
        token, result = payload
        it = self._it
        if it is None or token != it.token:
            return
        if isinstance(result, Infeasible):
            self._discard("optimization", result.reason)
            return
        now = self.kernel.now
        if now >= it.t_switch:
            self._discard("optimization", "stale")
            return
        it.candidate = result.trajectory
        self._set_phase(AgentPhase.CHECKING)
        it.arrivals_at_check = self.arrivals
        it.check_ok = not self._conflict_with_store(it.candidate)
        self._timer(now + self.config.check_duration, "check_done")

    def _end_check(self) -> None:
        it = self._it
        if not it.check_ok:
            self._discard("check", "conflict")
            return
        now = self.kernel.now
        if self.config.mode == "mader":
            it.arrivals_at_recheck = self.arrivals
            self._set_phase(AgentPhase.RECHECKING)
            self._timer(now + self.config.recheck_duration, "recheck_done")
            return
        self._send(MessageKind.NEW, it.candidate)
        self._set_phase(AgentPhase.DELAY_CHECKING)
        # Anything that arrived during Check is covered by checking the whole store.
        if self._conflict_with_store(it.candidate):
            self._fail_delay_check()
            return
        self._timer(now + self.config.delta_dc, "delay_check_done")

    def _end_recheck(self) -> None:
        it = self._it
        if it.arrivals_at_recheck > it.arrivals_at_check:
            self._discard("recheck", "arrival during check")
            return
        self._commit()

    def _end_delay_check(self) -> None:
        self._commit()

    def _fail_delay_check(self) -> None:
        self._send(MessageKind.COMMITTED, self.committed)
        self._discard("delay_check", "conflict")

    def _commit(self) -> None:
        it = self._it
        now = self.kernel.now
        if now >= it.t_switch:
            if self.config.mode == "rmader":
                self._send(MessageKind.COMMITTED, self.committed)
            self._discard("commit", "stale")
            return
        self.committed = self.committed.then(it.candidate)
        self.commits += 1
        self.kernel.log(
            self.id, "commit", {"digest": trajectory_digest(it.candidate), "t_switch": round(it.t_switch, 9)}
        )
        self._send(MessageKind.COMMITTED, self.committed)
        t_next = it.t_switch
        self._it = None
        self._token += 1
        self._set_phase(AgentPhase.IDLE)
        self._timer(t_next, "iterate")

    def on_message(self, msg: Message) -> None:
        accepted = self.store.apply(msg)
        self.kernel.log(
            self.id,
            "receive",
            {
                "from": msg.sender,
                "kind": msg.kind.value,
                "digest": trajectory_digest(msg.trajectory),
                "stale": not accepted,
            },
        )
        if not accepted:
            return
        self.arrivals += 1
        if self.phase == AgentPhase.DELAY_CHECKING and self._it is not None:
            if conflicts(self._it.candidate, msg.trajectory, self.config.box):
                self._fail_delay_check()
