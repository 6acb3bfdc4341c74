"""Piecewise cubic Bezier trajectories in 3D.

A :class:`Trajectory` is an ordered list of cubic Bezier segments with
absolute time stamps.  Past the last segment the trajectory holds its final
position forever with zero velocity and acceleration, so a committed
trajectory can always be executed no matter how long a peer takes to answer.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PolySegment",
    "Trajectory",
    "DynamicLimits",
    "StateSample",
    "evaluate",
    "smoothness_integrals",
    "count_stops",
    "check_limits",
    "constant_trajectory",
    "bezier_subcurve",
]

_BINOM3 = np.array([1.0, 3.0, 3.0, 1.0])


def bezier_subcurve(cps: np.ndarray, u0: float, u1: float) -> np.ndarray:
    """Control points of the cubic restricted to local parameters ``[u0, u1]``.

    Uses the blossom of the cubic: the k-th control point of the restriction is
    the blossom evaluated at ``u0`` repeated ``3 - k`` times and ``u1`` ``k``
    times.  The result lies in the convex hull of ``cps``.
    """
    out = np.empty((4, cps.shape[1]))
    for k in range(4):
        params = [u0] * (3 - k) + [u1] * k
        pts = cps.copy()
        for u in params:
            pts = (1.0 - u) * pts[:-1] + u * pts[1:]
        out[k] = pts[0]
    return out


def _bernstein(u: float) -> np.ndarray:
    v = 1.0 - u
    return _BINOM3 * np.array([v * v * v, u * v * v, u * u * v, u * u * u])


@dataclass(frozen=True)
class StateSample:
    t: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray


@dataclass(frozen=True)
class DynamicLimits:
    """Per-axis bounds on velocity (m/s), acceleration (m/s^2) and jerk (m/s^3)."""

    v_max: float = 10.0
    a_max: float = 20.0
    j_max: float = 30.0

    def __post_init__(self) -> None:
        for name in ("v_max", "a_max", "j_max"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def to_dict(self) -> dict:
        return {"v_max": self.v_max, "a_max": self.a_max, "j_max": self.j_max}


class PolySegment:
    """Cubic Bezier segment over the absolute time interval ``[t0, t1]``."""

    __slots__ = ("t0", "t1", "cps")

    def __init__(self, t0: float, t1: float, cps) -> None:
        cps = np.array(cps, dtype=float).reshape(4, 3)
        if not t1 - t0 > 0.0:
            raise ValueError(f"segment duration must be positive, got [{t0}, {t1}]")
        cps.setflags(write=False)
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.cps = cps

    @property
    def duration(self) -> float:
        return self.t1 - self.t0

    def velocity_cps(self) -> np.ndarray:
        return 3.0 * np.diff(self.cps, axis=0) / self.duration

    def acceleration_cps(self) -> np.ndarray:
        return 6.0 * np.diff(self.cps, n=2, axis=0) / self.duration**2

    def jerk(self) -> np.ndarray:
        return 6.0 * np.diff(self.cps, n=3, axis=0)[0] / self.duration**3

    def local(self, t: float) -> float:
        return (t - self.t0) / self.duration

    def state(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity and acceleration at absolute time ``t`` (de Casteljau)."""
        u = self.local(t)
        h = self.duration
        p = self.cps
        l1 = (1.0 - u) * p[:-1] + u * p[1:]
        l2 = (1.0 - u) * l1[:-1] + u * l1[1:]
        pos = (1.0 - u) * l2[0] + u * l2[1]
        vel = 3.0 * (l2[1] - l2[0]) / h
        acc = 6.0 * (l1[2] - 2.0 * l1[1] + l1[0]) / (h * h)
        return pos, vel, acc

    def position(self, t: float) -> np.ndarray:
        return _bernstein(self.local(t)) @ self.cps

    def sub_cps(self, ta: float, tb: float) -> np.ndarray:
        """Control points of this segment restricted to ``[ta, tb]``."""
        return bezier_subcurve(np.asarray(self.cps), self.local(ta), self.local(tb))

    def split(self, t: float) -> tuple["PolySegment", "PolySegment"]:
        return (
            PolySegment(self.t0, t, self.sub_cps(self.t0, t)),
            PolySegment(t, self.t1, self.sub_cps(t, self.t1)),
        )

    def to_dict(self) -> dict:
        return {"t0": self.t0, "t1": self.t1, "cps": self.cps.tolist()}

    def __repr__(self) -> str:
        return f"PolySegment([{self.t0:.4f}, {self.t1:.4f}])"


class Trajectory:
    """Time-contiguous sequence of cubic Bezier segments with a terminal hold."""

    __slots__ = ("segments", "_starts", "_arrays")

    def __init__(self, segments: Iterable[PolySegment]) -> None:
        segments = tuple(segments)
        if not segments:
            raise ValueError("trajectory needs at least one segment")
        for a, b in zip(segments[:-1], segments[1:]):
            if a.t1 != b.t0:
                raise ValueError(f"segments are not contiguous at t={a.t1} / {b.t0}")
        self.segments = segments
        self._starts = [s.t0 for s in segments]
        self._arrays = None

    # -- basic properties -------------------------------------------------
    @property
    def t_start(self) -> float:
        return self.segments[0].t0

    @property
    def t_end(self) -> float:
        return self.segments[-1].t1

    @property
    def terminal_hold(self) -> np.ndarray:
        return np.asarray(self.segments[-1].cps[3])

    @property
    def boundaries(self) -> list[float]:
        return self._starts + [self.t_end]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Boundary times ``(n + 1,)`` and control points ``(n, 4, 3)``."""
        if self._arrays is None:
            times = np.array(self.boundaries)
            cps = np.stack([s.cps for s in self.segments])
            self._arrays = (times, cps)
        return self._arrays

    def segment_index(self, t: float) -> int:
        return max(bisect.bisect_right(self._starts, t) - 1, 0)

    # -- evaluation -------------------------------------------------------
    def evaluate(self, t: float) -> StateSample:
        return evaluate(self, t)

    def position(self, t: float) -> np.ndarray:
        if t < self.t_start:
            raise ValueError("query before trajectory start")
        if t >= self.t_end:
            return self.terminal_hold.copy()
        return self.segments[self.segment_index(t)].position(t)

    def positions(self, times: np.ndarray) -> np.ndarray:
        """Vectorized positions at an array of times, shape ``(len(times), 3)``."""
        times = np.asarray(times, dtype=float)
        if times.size and times.min() < self.t_start:
            raise ValueError("query before trajectory start")
        bounds, cps = self.arrays()
        idx = np.clip(np.searchsorted(bounds, times, side="right") - 1, 0, len(cps) - 1)
        h = bounds[idx + 1] - bounds[idx]
        u = np.clip((times - bounds[idx]) / h, 0.0, 1.0)
        v = 1.0 - u
        basis = np.stack([v**3, 3 * u * v**2, 3 * u**2 * v, u**3], axis=1)
        return np.einsum("kj,kjd->kd", basis, cps[idx])

    # -- construction helpers ---------------------------------------------
    def truncate(self, t: float) -> list[PolySegment]:
        """Segments describing this trajectory on ``[t_start, t]``.

        When ``t`` lies beyond the end, a constant segment at the hold position
        fills the gap so the result stays contiguous.
        """
        if t <= self.t_start:
            raise ValueError("truncation time must be after trajectory start")
        if t > self.t_end:
            hold = self.terminal_hold
            return list(self.segments) + [PolySegment(self.t_end, t, np.tile(hold, (4, 1)))]
        i = self.segment_index(t)
        seg = self.segments[i]
        if t == seg.t0:
            return list(self.segments[:i])
        if t == seg.t1:
            return list(self.segments[: i + 1])
        head, _ = seg.split(t)
        return list(self.segments[:i]) + [head]

    def then(self, suffix: "Trajectory") -> "Trajectory":
        """This trajectory up to ``suffix.t_start`` followed by ``suffix``."""
        return Trajectory(self.truncate(suffix.t_start) + list(suffix.segments))

    def trim_before(self, t: float) -> "Trajectory":
        """Drop segments that end at or before ``t`` (keeps the last segment)."""
        i = self.segment_index(t)
        if t >= self.t_end:
            i = len(self.segments) - 1
        if i == 0:
            return self
        return Trajectory(self.segments[i:])

    def pieces(self, t_from: float):
        """Yield ``(ta, tb, cps)`` pieces covering ``[t_from, inf)``.

        Segments are clipped to start at ``t_from``; the terminal hold appears
        as a final piece with ``tb = inf`` and a single control point.
        """
        for seg in self.segments:
            if seg.t1 <= t_from:
                continue
            if seg.t0 >= t_from:
                yield seg.t0, seg.t1, np.asarray(seg.cps)
            else:
                yield t_from, seg.t1, seg.sub_cps(t_from, seg.t1)
        yield max(self.t_end, t_from), float("inf"), self.terminal_hold[None, :]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {"segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        return cls(PolySegment(s["t0"], s["t1"], s["cps"]) for s in data["segments"])

    def is_c2_continuous(self, tol: float = 1e-9) -> bool:
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            sa = a.state(a.t1)
            sb = b.state(b.t0)
            for x, y in zip(sa, sb):
                if np.max(np.abs(x - y)) > tol:
                    return False
        return True

    def __len__(self) -> int:
        return len(self.segments)

    def __repr__(self) -> str:
        return f"Trajectory({len(self.segments)} segments, [{self.t_start:.3f}, {self.t_end:.3f}])"


def constant_trajectory(position: Sequence[float], t0: float, duration: float = 1e-3) -> Trajectory:
    """A single constant segment at ``position`` starting at ``t0``."""
    cps = np.tile(np.asarray(position, dtype=float), (4, 1))
    return Trajectory([PolySegment(t0, t0 + duration, cps)])


def evaluate(traj: Trajectory, t: float) -> StateSample:
    """State of ``traj`` at absolute time ``t`` with terminal-hold semantics."""
    if t < traj.t_start:
        raise ValueError("query before trajectory start")
    if t >= traj.t_end:
        zero = np.zeros(3)
        return StateSample(t, traj.terminal_hold.copy(), zero, zero.copy())
    pos, vel, acc = traj.segments[traj.segment_index(t)].state(t)
    return StateSample(t, pos, vel, acc)


def smoothness_integrals(traj: Trajectory) -> dict[str, float]:
    """Exact integrals of squared acceleration and jerk norms over the trajectory.

    Acceleration is linear on each cubic segment, so with end values ``a0`` and
    ``a1`` over duration ``h`` the integral is ``h/3 (|a0|^2 + a0.a1 + |a1|^2)``.
    Jerk is constant per segment.
    """
    accel = 0.0
    jerk = 0.0
    for seg in traj.segments:
        h = seg.duration
        a0, a1 = seg.acceleration_cps()
        accel += h / 3.0 * (a0 @ a0 + a0 @ a1 + a1 @ a1)
        j = seg.jerk()
        jerk += (j @ j) * h
    return {"accel_integral": float(accel), "jerk_integral": float(jerk)}


def count_stops(
    traj: Trajectory, v_stop: float = 0.1, t_min_stop: float = 0.2, dt: float = 0.01
) -> int:
    """Number of times the trajectory comes to rest on its way to the end.

    A stop is a maximal run of grid samples with speed below ``v_stop`` lasting
    at least ``t_min_stop``, preceded and followed by motion.  The rest before
    departure and the final rest that merges into the terminal hold are not
    stops.
    """
    if not (v_stop > 0 and t_min_stop > 0):
        raise ValueError("v_stop and t_min_stop must be positive")
    n = int(np.floor((traj.t_end - traj.t_start) / dt)) + 1
    times = traj.t_start + dt * np.arange(n)
    speeds = np.empty(n)
    for k, t in enumerate(times):
        seg = traj.segments[traj.segment_index(t)]
        speeds[k] = np.linalg.norm(seg.state(min(t, seg.t1))[1])
    slow = speeds < v_stop
    stops = 0
    k = 0
    while k < n:
        if not slow[k]:
            k += 1
            continue
        start = k
        while k < n and slow[k]:
            k += 1
        touches_start = start == 0
        touches_end = k == n
        if not touches_start and not touches_end and (k - start) * dt >= t_min_stop:
            stops += 1
    return stops


def check_limits(traj: Trajectory, limits: DynamicLimits) -> bool:
    """Sufficient test that the trajectory respects per-axis dynamic limits.

    Checks the Bezier control points of velocity, acceleration and jerk; the
    derivative curves lie in the hull of those points.
    """
    for seg in traj.segments:
        if np.max(np.abs(seg.velocity_cps())) > limits.v_max:
            return False
        if np.max(np.abs(seg.acceleration_cps())) > limits.a_max:
            return False
        if np.max(np.abs(seg.jerk())) > limits.j_max:
            return False
    return True
