"""Convex trajectory optimizer with fixed separating planes.

The trajectory is a uniform cubic B-spline with ``N`` segments of equal
duration; its Bezier control points are affine in the free B-spline control
points.  The initial position, velocity and acceleration pin the first three
B-spline points and rest at the end pins the last three to a single point, so
``N - 2`` points per axis remain free.

Separating planes are computed once between a straight-line initial guess and
every peer trajectory piece, then held fixed; what remains is a small QP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import SEPARATION_TOL, BoundaryBox, SeparatingPlane, _piece_hull, _plane, _subcurve
from .qp import solve_qp
from .trajectory import DynamicLimits, PolySegment, StateSample, Trajectory, check_limits

__all__ = [
    "PlannerConfig",
    "PlanRequest",
    "PlanResult",
    "Infeasible",
    "make_request",
    "choose_segment_duration",
    "initial_guess",
    "detour_guesses",
    "plan",
    "bspline_basis",
]


@dataclass(frozen=True)
class PlannerConfig:
    num_segments: int = 6
    horizon_min: float = 1.0
    horizon_max: float = 4.0
    w_goal: float = 1e7
    tolerance: float = 1e-10
    max_iterations: int = 2000
    plane_margin: float = 1e-4
    limit_margin: float = 1e-9
    alternative_guesses: bool = True
    fallback_clearance: float = 0.2

    def to_dict(self) -> dict:
        return {
            "num_segments": self.num_segments,
            "horizon_min": self.horizon_min,
            "horizon_max": self.horizon_max,
            "w_goal": self.w_goal,
            "tolerance": self.tolerance,
            "max_iterations": self.max_iterations,
            "plane_margin": self.plane_margin,
            "limit_margin": self.limit_margin,
            "alternative_guesses": self.alternative_guesses,
            "fallback_clearance": self.fallback_clearance,
        }

    @classmethod
    def from_dict(cls, data: dict | None) -> "PlannerConfig":
        return cls(**(data or {}))


@dataclass(frozen=True)
class PlanRequest:
    start: StateSample
    goal: np.ndarray
    t_switch: float
    num_segments: int
    segment_duration: float
    limits: DynamicLimits
    constraints: tuple = ()
    box: BoundaryBox = field(default_factory=BoundaryBox)
    w_goal: float = 1e7
    reference: Trajectory | None = None

    def validate(self) -> None:
        if self.num_segments < 2:
            raise ValueError("num_segments must be >= 2")
        if not self.segment_duration > 0.0:
            raise ValueError("segment_duration must be positive")
        if self.start.t != self.t_switch:
            raise ValueError("start state must be sampled at t_switch")
        if np.shape(self.goal) != (3,):
            raise ValueError("goal must be a 3D point")


@dataclass(frozen=True)
class PlanResult:
    """Optimized trajectory plus the fixed planes it was constrained by.

    Plane ``k`` binds agent piece ``plane_pieces[k]`` (segment index, or
    ``num_segments`` for the terminal hold) against peer ``plane_peers[k]``.
    """

    trajectory: Trajectory
    plane_pieces: np.ndarray
    plane_peers: np.ndarray
    plane_normals: np.ndarray
    plane_offsets: np.ndarray
    solver_iterations: int
    cost: float
    goal_cost: float

    @property
    def planes_used(self) -> list:
        return [
            (int(i), int(peer), SeparatingPlane(nrm, float(off)))
            for i, peer, nrm, off in zip(self.plane_pieces, self.plane_peers, self.plane_normals, self.plane_offsets)
        ]


@dataclass(frozen=True)
class Infeasible:
    reason: str

    def __bool__(self) -> bool:
        return False


def choose_segment_duration(start: StateSample, goal, limits: DynamicLimits, config: PlannerConfig) -> float:
    """Segment duration so the horizon covers a straight-line move to the goal.

    The straight-line time is the largest of the rest-to-rest lower bounds
    implied by each limit, plus the time needed to shed the current speed,
    padded by 30 % and clipped to the configured horizon bounds.
    """
    dist = float(np.linalg.norm(np.asarray(goal) - start.position))
    t_line = max(
        dist / limits.v_max,
        2.0 * math.sqrt(dist / limits.a_max),
        (32.0 * dist / limits.j_max) ** (1.0 / 3.0),
    )
    t_stop = (
        float(np.linalg.norm(start.velocity)) / limits.a_max
        + float(np.linalg.norm(start.acceleration)) / limits.j_max
        + limits.a_max / limits.j_max
    )
    horizon = min(max(1.3 * max(t_line, t_stop), config.horizon_min), config.horizon_max)
    return horizon / config.num_segments


def make_request(
    start: StateSample,
    goal,
    limits: DynamicLimits,
    constraints=(),
    box: BoundaryBox | None = None,
    config: PlannerConfig | None = None,
    reference: Trajectory | None = None,
) -> PlanRequest:
    config = config or PlannerConfig()
    goal = np.asarray(goal, dtype=float)
    return PlanRequest(
        start=start,
        goal=goal,
        t_switch=start.t,
        num_segments=config.num_segments,
        segment_duration=choose_segment_duration(start, goal, limits, config),
        limits=limits,
        constraints=tuple(constraints),
        box=box or BoundaryBox(),
        w_goal=config.w_goal,
        reference=reference,
    )


# ---------------------------------------------------------------------------
# parameterization
# ---------------------------------------------------------------------------

# Bezier control points of one uniform cubic B-spline segment from q_i..q_{i+3}.
_BSPLINE_TO_BEZIER = np.array(
    [
        [1.0, 4.0, 1.0, 0.0],
        [0.0, 4.0, 2.0, 0.0],
        [0.0, 2.0, 4.0, 0.0],
        [0.0, 1.0, 4.0, 1.0],
    ]
) / 6.0


def bspline_basis(num_segments: int) -> np.ndarray:
    """Map from the ``N + 3`` B-spline points to the ``4 N`` Bezier points (one axis)."""
    n = num_segments
    B = np.zeros((4 * n, n + 3))
    for i in range(n):
        B[4 * i : 4 * i + 4, i : i + 4] = _BSPLINE_TO_BEZIER
    return B


def _fixed_bspline_points(start: StateSample, h: float) -> np.ndarray:
    """First three B-spline points reproducing position, velocity, acceleration."""
    p, v, a = start.position, start.velocity, start.acceleration
    q1 = p - a * h * h / 6.0
    q0 = q1 + a * h * h / 2.0 - h * v
    q2 = q1 + a * h * h / 2.0 + h * v
    return np.stack([q0, q1, q2])


class _Layout:
    """Affine maps from the free variables to control points, for one request."""

    def __init__(self, req: PlanRequest) -> None:
        n = req.num_segments
        h = req.segment_duration
        nf = n - 2
        self.n, self.h, self.nf = n, h, nf
        # q (N+3) = S x + s0 per axis
        S = np.zeros((n + 3, nf))
        for k in range(nf):
            S[3 + k, k] = 1.0
        S[n + 1, nf - 1] = 1.0 if nf else 0.0
        S[n + 2, nf - 1] = 1.0 if nf else 0.0
        fixed = _fixed_bspline_points(req.start, h)
        s0 = np.zeros((n + 3, 3))
        s0[:3] = fixed
        if nf == 0:
            s0[3:] = fixed[2]
        self.S, self.s0 = S, s0
        B = bspline_basis(n)
        self.P_lin = B @ S  # (4N, nf) per axis
        self.P_off = B @ s0  # (4N, 3)
        D3 = np.zeros((n, n + 3))
        for i in range(n):
            D3[i, i : i + 4] = [-1.0, 3.0, -3.0, 1.0]
        self.J_lin = D3 @ S / h**3
        self.J_off = D3 @ s0 / h**3

    def control_points(self, x: np.ndarray) -> np.ndarray:
        X = x.reshape(3, self.nf).T if self.nf else np.zeros((0, 3))
        P = self.P_lin @ X + self.P_off
        return P.reshape(self.n, 4, 3)

    def derivative_rows(self):
        """(lin, off) pairs for velocity, acceleration and jerk control points."""
        n, h = self.n, self.h
        Dv = np.zeros((3 * n, 4 * n))
        Da = np.zeros((2 * n, 4 * n))
        Dj = np.zeros((n, 4 * n))
        for i in range(n):
            for k in range(3):
                Dv[3 * i + k, 4 * i + k] = -3.0 / h
                Dv[3 * i + k, 4 * i + k + 1] = 3.0 / h
            for k in range(2):
                Da[2 * i + k, 4 * i + k : 4 * i + k + 3] = np.array([6.0, -12.0, 6.0]) / h**2
            Dj[i, 4 * i : 4 * i + 4] = np.array([-6.0, 18.0, -18.0, 6.0]) / h**3
        return [(D @ self.P_lin, D @ self.P_off) for D in (Dv, Da, Dj)]


# ---------------------------------------------------------------------------
# initial guesses
# ---------------------------------------------------------------------------


def _pinned_points(req: PlanRequest) -> np.ndarray:
    """First three Bezier points of the plan; the start state fixes them."""
    h = req.segment_duration
    p, v, a = req.start.position, req.start.velocity, req.start.acceleration
    return np.stack([p, p + h * v / 3.0, p + 2.0 * h * v / 3.0 + a * h * h / 6.0])


def _polyline_guess(req: PlanRequest, waypoints: list) -> Trajectory:
    """Constant-speed walk along ``waypoints`` (ending at the goal), clipped to v_max.

    The first segment is a cubic Hermite blend from the start state to the
    walking velocity, so the guess is C1 at ``t_switch``.
    """
    n, h = req.num_segments, req.segment_duration
    t0 = req.t_switch
    horizon = n * h
    vmax = req.limits.v_max
    pinned = _pinned_points(req)
    p0 = pinned[0]
    v0 = np.asarray(req.start.velocity, dtype=float)
    pts = [p0] + [np.asarray(w, dtype=float) for w in waypoints]
    legs = [float(np.linalg.norm(b - a)) for a, b in zip(pts[:-1], pts[1:])]
    total = sum(legs)
    first = pts[1] - p0
    w = np.zeros(3) if legs[0] == 0.0 else first / legs[0] * min(vmax, total / horizon)
    x1 = p0 + h * (v0 + w) / 2.0
    # walk from x1 through the remaining waypoints; the first one is skipped
    # when x1 already went past it
    path = [x1] + pts[2:] if len(pts) > 2 and legs[0] <= float(np.linalg.norm(x1 - p0)) else [x1] + pts[1:]
    seg_len = np.array([float(np.linalg.norm(b - a)) for a, b in zip(path[:-1], path[1:])])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    length = float(cum[-1])
    speed = min(vmax, length / (horizon - h))

    def at(s: float) -> np.ndarray:
        s = min(s, length)
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        if k < 0 or seg_len[k] == 0.0:
            return path[min(k + 1, len(path) - 1)].copy() if k >= 0 else path[0].copy()
        return path[k] + (path[k + 1] - path[k]) * ((s - cum[k]) / seg_len[k])

    seg_cps = [np.stack([pinned[0], pinned[1], pinned[2], x1])]
    for i in range(1, n):
        seg_cps.append(np.stack([at(speed * ((i - 1) * h + k * h / 3.0)) for k in range(4)]))
    times = [t0 + i * h for i in range(n + 1)]
    return Trajectory(PolySegment(times[i], times[i + 1], seg_cps[i]) for i in range(n))


def initial_guess(req: PlanRequest) -> Trajectory:
    """Straight constant-speed line toward the goal, used only to place planes."""
    return _polyline_guess(req, [np.asarray(req.goal, dtype=float)])


def _smooth_polyline_guess(req: PlanRequest, waypoints: list) -> Trajectory:
    """Walk along ``waypoints`` with a rest-to-rest quintic timing law.

    The initial velocity is carried by a term that fades out over the
    horizon, so the guess starts like the agent and ends at rest, which
    makes its early pieces reachable within the dynamic limits.
    """
    n, h = req.num_segments, req.segment_duration
    horizon = n * h
    pinned = _pinned_points(req)
    p0 = pinned[0]
    v0 = np.asarray(req.start.velocity, dtype=float)
    path = [p0] + [np.asarray(w, dtype=float) for w in waypoints]
    seg_len = np.array([float(np.linalg.norm(b - a)) for a, b in zip(path[:-1], path[1:])])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    length = float(cum[-1])

    def at(tau: float) -> np.ndarray:
        u = min(max(tau / horizon, 0.0), 1.0)
        s = length * u**3 * (10.0 - 15.0 * u + 6.0 * u * u)
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        if seg_len[k] == 0.0:
            p = path[k + 1].copy()
        else:
            p = path[k] + (path[k + 1] - path[k]) * (min(s - cum[k], seg_len[k]) / seg_len[k])
        return p + v0 * tau * (1.0 - u) ** 2

    seg_cps = [np.stack([pinned[0], pinned[1], pinned[2], at(h)])]
    for i in range(1, n):
        seg_cps.append(np.stack([at(i * h + k * h / 3.0) for k in range(4)]))
    times = [req.t_switch + i * h for i in range(n + 1)]
    return Trajectory(PolySegment(times[i], times[i + 1], seg_cps[i]) for i in range(n))


def _sidestep_guess(req: PlanRequest, waypoint: np.ndarray, stage_pieces: int = 2) -> Trajectory:
    """Move to ``waypoint`` over the first ``stage_pieces`` pieces, then to the goal.

    Both legs use a rest-to-rest quintic timing law and the switch falls on a
    piece boundary, so no piece hull cuts the corner between the legs.
    """
    n, h = req.num_segments, req.segment_duration
    stage_pieces = min(stage_pieces, n - 1)
    t_stage = stage_pieces * h
    rest = n * h - t_stage
    pinned = _pinned_points(req)
    p0 = pinned[0]
    v0 = np.asarray(req.start.velocity, dtype=float)
    goal = np.asarray(req.goal, dtype=float)

    def smooth(u: float) -> float:
        u = min(max(u, 0.0), 1.0)
        return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)

    def at(tau: float) -> np.ndarray:
        if tau <= t_stage:
            u = tau / t_stage
            return p0 + (waypoint - p0) * smooth(u) + v0 * tau * (1.0 - u) ** 2
        return waypoint + (goal - waypoint) * smooth((tau - t_stage) / rest)

    seg_cps = [np.stack([pinned[0], pinned[1], pinned[2], at(h)])]
    for i in range(1, n):
        seg_cps.append(np.stack([at(i * h + k * h / 3.0) for k in range(4)]))
    times = [req.t_switch + i * h for i in range(n + 1)]
    return Trajectory(PolySegment(times[i], times[i + 1], seg_cps[i]) for i in range(n))


def detour_guesses(req: PlanRequest, offset: float = 3.0) -> list[Trajectory]:
    """Guesses that leave the straight line, right-hand side first.

    Two go through a point displaced sideways from the midpoint; two first
    step sideways by two box widths, which frees agents parked face to face.
    """
    p0 = np.asarray(req.start.position, dtype=float)
    goal = np.asarray(req.goal, dtype=float)
    delta = goal - p0
    side = np.cross(delta, [0.0, 0.0, 1.0])
    if np.linalg.norm(side) < 1e-9:
        side = np.array([1.0, 0.0, 0.0])
    side = side / np.linalg.norm(side)
    lateral = min(offset, 0.5 * float(np.linalg.norm(delta)) + 1.0)
    step = 2.0 * float(np.max(req.box.pairwise[:2]))
    mid = p0 + 0.5 * delta
    out = []
    for sgn in (1.0, -1.0):
        out.append(_smooth_polyline_guess(req, [mid + sgn * lateral * side, goal]))
    for sgn in (1.0, -1.0):
        out.append(_sidestep_guess(req, p0 + sgn * step * side))
    return out


@njit(cache=True)
def _span_hull(times, cps, ta, tb):
    """Union of control points covering ``[ta, tb]``; ``tb`` may be inf."""
    n = cps.shape[0]
    out = np.empty((4 * n + 1, 3))
    m = 0
    for i in range(n):
        lo = max(ta, times[i])
        hi = min(tb, times[i + 1])
        if hi > lo:
            h = times[i + 1] - times[i]
            sub = _subcurve(cps[i], (lo - times[i]) / h, (hi - times[i]) / h)
            for k in range(4):
                out[m] = sub[k]
                m += 1
    if tb > times[n] or m == 0:
        out[m] = cps[n - 1, 3]
        m += 1
    return out[:m]


@njit(cache=True)
def _guess_hulls(times, cps, piece_times, pinned):
    """Hull points of a guess on every agent piece, padded to a common size.

    Piece 0 also contains the pinned points so planes built from it never cut
    off the start state.
    """
    npieces = piece_times.shape[0] - 1
    hulls = []
    kmax = 0
    for i in range(npieces):
        hh = _span_hull(times, cps, piece_times[i], piece_times[i + 1])
        if i == 0:
            both = np.empty((hh.shape[0] + pinned.shape[0], 3))
            both[: hh.shape[0]] = hh
            both[hh.shape[0] :] = pinned
            hh = both
        hulls.append(hh)
        kmax = max(kmax, hh.shape[0])
    out = np.empty((npieces, kmax, 3))
    for i in range(npieces):
        hh = hulls[i]
        for k in range(kmax):
            out[i, k] = hh[min(k, hh.shape[0] - 1)]
    return out


# ---------------------------------------------------------------------------
# plane construction
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fallback_plane(A, B, inflate, chord, pinned, clearance):
    """Plane tangent to inflated B when A already intersects it.

    Tries the axis directions and the centroid offset (also with the chord
    component removed) and keeps the one needing the least displacement of A,
    preferring planes that the ``pinned`` points (fixed by the start state)
    already satisfy.  The plane sits ``clearance`` off the inflated hull when
    the pinned points allow it.
    """
    ca = np.zeros(3)
    cb = np.zeros(3)
    for i in range(A.shape[0]):
        ca += A[i]
    ca /= A.shape[0]
    for i in range(B.shape[0]):
        cb += B[i]
    cb /= B.shape[0]
    cands = np.zeros((10, 3))
    nc = 0
    off = ca - cb
    nrm = np.sqrt(off @ off)
    if nrm > 1e-9:
        cands[nc] = off / nrm
        nc += 1
    cl = np.sqrt(chord @ chord)
    if cl > 1e-9:
        u = chord / cl
        perp = off - (off @ u) * u
        pn = np.sqrt(perp @ perp)
        if pn > 1e-9:
            cands[nc] = perp / pn
            nc += 1
    for ax in range(3):
        cands[nc, ax] = 1.0
        nc += 1
        cands[nc, ax] = -1.0
        nc += 1
    best = np.inf
    best_ok = False
    best_n = cands[0].copy()
    best_d = 0.0
    for c in range(nc):
        n = cands[c]
        a_max = -np.inf
        for i in range(A.shape[0]):
            a_max = max(a_max, A[i] @ n)
        b_min = np.inf
        box = inflate[0] * abs(n[0]) + inflate[1] * abs(n[1]) + inflate[2] * abs(n[2])
        for i in range(B.shape[0]):
            b_min = min(b_min, B[i] @ n - box)
        pen = a_max - b_min
        ok = True
        for i in range(pinned.shape[0]):
            if pinned[i] @ n >= b_min:
                ok = False
        if (ok and not best_ok) or (ok == best_ok and pen < best - 1e-9):
            best = pen
            best_ok = ok
            best_n = n.copy()
            best_d = b_min
    pin_max = -np.inf
    for i in range(pinned.shape[0]):
        pin_max = max(pin_max, pinned[i] @ best_n)
    if best_ok:
        best_d = max(best_d - clearance, min(best_d, pin_max + 1e-6))
    return best_n, best_d


@njit(cache=True)
def _planes_against(hulls, piece_times, pinned, peer_times, peer_cps, t_from, inflate, tol, clearance):
    """Planes between every guess piece and every time-overlapping peer piece.

    ``hulls[i]`` covers agent piece ``[piece_times[i], piece_times[i + 1]]``;
    the last piece ends at inf.  Returns piece indices, normals, offsets and
    a flag telling whether each plane came from the fallback (guess already in
    conflict with the peer).
    """
    n_agent = hulls.shape[0]
    n_peer = peer_cps.shape[0]
    cap = n_agent * (n_peer + 2) * 2
    idx = np.empty(cap, dtype=np.int64)
    normals = np.empty((cap, 3))
    offsets = np.empty(cap)
    fallback = np.zeros(cap, dtype=np.bool_)
    count = 0
    pb0 = np.empty(n_peer + 1)
    pb1 = np.empty(n_peer + 1)
    npc = 0
    for j in range(n_peer):
        if peer_times[j + 1] > t_from:
            pb0[npc] = max(peer_times[j], t_from)
            pb1[npc] = peer_times[j + 1]
            npc += 1
    pb0[npc] = max(peer_times[n_peer], t_from)
    pb1[npc] = np.inf
    npc += 1
    no_pins = np.empty((0, 3))
    for i in range(n_agent):
        a0 = piece_times[i]
        a1 = piece_times[i + 1]
        A = hulls[i]
        chord = A[A.shape[0] - 1] - A[0]
        for j in range(npc):
            lo = max(a0, pb0[j])
            hi = min(a1, pb1[j])
            if not hi > lo:
                continue
            Bh = _piece_hull(peer_times, peer_cps, lo, hi)
            ok, nrm, off = _plane(A, Bh, inflate, tol)
            if ok and clearance > 0.0:
                # Stay clear of the peer rather than creeping up to it.
                a_max = -np.inf
                for k in range(A.shape[0]):
                    a_max = max(a_max, A[k] @ nrm)
                box = inflate[0] * abs(nrm[0]) + inflate[1] * abs(nrm[1]) + inflate[2] * abs(nrm[2])
                b_min = np.inf
                for k in range(Bh.shape[0]):
                    b_min = min(b_min, Bh[k] @ nrm - box)
                off = min(off, max(b_min - clearance, a_max))
            if not ok:
                nrm, off = _fallback_plane(A, Bh, inflate, chord, pinned if i == 0 else no_pins, clearance)
                fallback[count] = True
            idx[count] = i
            normals[count] = nrm
            offsets[count] = off
            count += 1
    return idx[:count], normals[:count], offsets[:count], fallback[:count]


def _planes_for_guess(req: PlanRequest, guess: Trajectory, pinned: np.ndarray, clearance: float = 0.0):
    n, h = req.num_segments, req.segment_duration
    piece_times = np.array([req.t_switch + i * h for i in range(n + 1)] + [np.inf])
    gt, gc = guess.arrays()
    hulls = _guess_hulls(gt, gc, piece_times, pinned)
    inflate = req.box.pairwise
    pieces, peers, normals, offsets, fallbacks = [], [], [], [], 0
    for peer_id, peer_traj in req.constraints:
        ptimes, pcps = peer_traj.arrays()
        idx, nrm, off, fb = _planes_against(
            hulls, piece_times, pinned, ptimes, pcps, req.t_switch, inflate, SEPARATION_TOL, clearance
        )
        pieces.append(idx)
        peers.append(np.full(len(idx), peer_id, dtype=np.int64))
        normals.append(nrm)
        offsets.append(off)
        fallbacks += int(fb.sum())
    if not pieces:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0)), 0
    planes = (np.concatenate(pieces), np.concatenate(peers), np.concatenate(normals), np.concatenate(offsets))
    return planes, fallbacks


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def _limit_rows(layout: _Layout, limits: DynamicLimits, margin: float):
    rows = []
    rhs = []
    nf = layout.nf
    bounds = (limits.v_max, limits.a_max, limits.j_max)
    for (lin, off), bound in zip(layout.derivative_rows(), bounds):
        bound = bound * (1.0 - margin)
        for axis in range(3):
            block = np.zeros((lin.shape[0], 3 * nf))
            block[:, axis * nf : (axis + 1) * nf] = lin
            rows.append(block)
            rhs.append(bound - off[:, axis])
            rows.append(-block)
            rhs.append(bound + off[:, axis])
    return np.vstack(rows), np.concatenate(rhs)


def _objective(layout: _Layout, goal: np.ndarray, w: float):
    nf, h = layout.nf, layout.h
    Jl = layout.J_lin
    G = np.zeros((3 * nf, 3 * nf))
    a = np.zeros(3 * nf)
    for axis in range(3):
        sl = slice(axis * nf, (axis + 1) * nf)
        G[sl, sl] = 2.0 * h * Jl.T @ Jl
        a[sl] = 2.0 * h * Jl.T @ layout.J_off[:, axis]
        G[axis * nf + nf - 1, axis * nf + nf - 1] += 2.0 * w
        a[axis * nf + nf - 1] -= 2.0 * w * goal[axis]
    return G, a


def _solve_with_planes(req, config, layout, planes, C_lim, h_lim, G, a):
    n, nf, h = layout.n, layout.nf, layout.h
    pieces, peers, normals, offsets = planes
    C, hvec = C_lim, h_lim
    plane_of = point_of = None
    if len(pieces):
        # point rows: 4 per segment plane, 1 (the final point) per terminal plane
        seg = pieces < n
        plane_of = np.concatenate([np.repeat(np.flatnonzero(seg), 4), np.flatnonzero(~seg)])
        point_of = np.concatenate(
            [((4 * pieces[seg])[:, None] + np.arange(4)[None, :]).ravel(), np.full(int(np.sum(~seg)), 4 * n - 1)]
        )
        nrm = normals[plane_of]
        lin = layout.P_lin[point_of]
        rows = np.hstack([nrm[:, 0:1] * lin, nrm[:, 1:2] * lin, nrm[:, 2:3] * lin])
        slack = offsets[plane_of] - np.einsum("kd,kd->k", nrm, layout.P_off[point_of])
        # Points fixed by the start state only need strict separation.
        fixed = ~np.any(rows != 0.0, axis=1)
        if np.any(slack[fixed] <= 0.0):
            return Infeasible("start state violates a separating plane")
        C = np.vstack([C_lim, rows[~fixed]])
        hvec = np.concatenate([h_lim, slack[~fixed] - config.plane_margin])

    iterations = 0
    if nf == 0:
        x = np.zeros(0)
        if np.any(hvec < 0.0):
            return Infeasible("fixed trajectory violates constraints")
    else:
        res = solve_qp(G, a, C, hvec, max_iter=config.max_iterations, tol=config.tolerance)
        if not res.ok:
            return Infeasible(f"qp {res.status}")
        x = res.x
        iterations = res.iterations

    cps = layout.control_points(x)
    times = [req.t_switch + i * h for i in range(n + 1)]
    traj = Trajectory(PolySegment(times[i], times[i + 1], cps[i]) for i in range(n))
    if not check_limits(traj, req.limits):
        return Infeasible("verification failed: dynamic limits")
    if plane_of is not None:
        flat = cps.reshape(-1, 3)
        if np.any(np.einsum("kd,kd->k", flat[point_of], normals[plane_of]) - offsets[plane_of] >= 0.0):
            return Infeasible("verification failed: separating plane")
    goal = np.asarray(req.goal, dtype=float)
    jerk = sum(float(s.jerk() @ s.jerk()) * h for s in traj.segments)
    goal_cost = req.w_goal * float(np.sum((cps[-1, 3] - goal) ** 2))
    return PlanResult(traj, pieces, peers, normals, offsets, iterations, jerk + goal_cost, goal_cost)


def plan(req: PlanRequest, config: PlannerConfig | None = None) -> PlanResult | Infeasible:
    """Solve the fixed-plane convex program for ``req``.

    Planes come from the straight-line guess.  When that guess already
    conflicts with a peer, two sideways detours and the agent's current
    trajectory (``req.reference``) are tried as well; guesses needing no
    fallback plane are solved first.  Returns :class:`Infeasible` when no
    guess yields a feasible program or the solution fails the post-hoc limit
    and plane checks.
    """
    config = config or PlannerConfig()
    req.validate()
    layout = _Layout(req)
    pinned = _pinned_points(req)
    C_lim, h_lim = _limit_rows(layout, req.limits, config.limit_margin)
    G, a = _objective(layout, np.asarray(req.goal, dtype=float), req.w_goal)

    planes, fallbacks = _planes_for_guess(req, initial_guess(req), pinned, config.fallback_clearance)
    if fallbacks == 0 or not config.alternative_guesses:
        return _solve_with_planes(req, config, layout, planes, C_lim, h_lim, G, a)
    options = [(fallbacks, 0, planes)]
    extra = detour_guesses(req)
    if req.reference is not None:
        extra.append(req.reference)
    for k, guess in enumerate(extra, start=1):
        p, fb = _planes_for_guess(req, guess, pinned, config.fallback_clearance)
        options.append((fb, k, p))
    options.sort(key=lambda o: (o[0], o[1]))
    result = Infeasible("no guess")
    for _, _, p in options:
        result = _solve_with_planes(req, config, layout, p, C_lim, h_lim, G, a)
        if result:
            return result
    return result
