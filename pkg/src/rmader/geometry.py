"""Boundary boxes, separating planes and conservative trajectory collision checks.

The conservative checker works on Bezier control-point hulls: on every time
interval where both trajectories are single cubics, the hull of one
trajectory's control points is Minkowski-inflated by the pairwise box and
tested for separation from the other's hull.  Separation of every interval
proves the trajectories never bring the two boxes into overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .trajectory import Trajectory

__all__ = [
    "BoundaryBox",
    "SeparatingPlane",
    "boxes_collide",
    "closest_points",
    "compute_separating_plane",
    "check_pair_collision",
    "sampling_oracle_collision",
]

SEPARATION_TOL = 1e-9


@dataclass(frozen=True)
class BoundaryBox:
    """Axis-aligned safety box around one agent, given by its half extents (m)."""

    half_extents: tuple[float, float, float] = (0.4, 0.4, 0.75)

    def __post_init__(self) -> None:
        if len(self.half_extents) != 3 or min(self.half_extents) <= 0.0:
            raise ValueError("half extents must be three positive numbers")
        object.__setattr__(self, "half_extents", tuple(float(h) for h in self.half_extents))

    @property
    def pairwise(self) -> np.ndarray:
        """Half extents of the Minkowski sum of two such boxes."""
        return 2.0 * np.asarray(self.half_extents)

    @classmethod
    def from_full_extents(cls, x: float, y: float, z: float) -> "BoundaryBox":
        return cls((x / 2.0, y / 2.0, z / 2.0))


@dataclass(frozen=True)
class SeparatingPlane:
    """Half-space ``normal . x <= offset`` holding the first hull."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset


def boxes_collide(p1, p2, box: BoundaryBox) -> bool:
    """True iff two agents' boxes centered at ``p1`` and ``p2`` overlap."""
    delta = np.abs(np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float))
    return bool(np.all(delta < box.pairwise))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _support(points, inflate, direction):
    best = 0
    best_val = -np.inf
    for i in range(points.shape[0]):
        val = points[i, 0] * direction[0] + points[i, 1] * direction[1] + points[i, 2] * direction[2]
        if val > best_val:
            best_val = val
            best = i
    out = points[best].copy()
    for k in range(3):
        out[k] += inflate[k] if direction[k] >= 0.0 else -inflate[k]
    return out


@njit(cache=True)
def _solve_small(M, rhs, m):
    # Gaussian elimination with partial pivoting on the leading m x m block.
    A = M[:m, :m].copy()
    b = rhs[:m].copy()
    scale = 0.0
    for i in range(m):
        for j in range(m):
            scale = max(scale, abs(A[i, j]))
    if scale == 0.0:
        return False, b
    for col in range(m):
        piv = col
        for r in range(col + 1, m):
            if abs(A[r, col]) > abs(A[piv, col]):
                piv = r
        if abs(A[piv, col]) <= 1e-14 * scale:
            return False, b
        if piv != col:
            for j in range(m):
                tmp = A[col, j]
                A[col, j] = A[piv, j]
                A[piv, j] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        for r in range(col + 1, m):
            f = A[r, col] / A[col, col]
            for j in range(col, m):
                A[r, j] -= f * A[col, j]
            b[r] -= f * b[col]
    x = np.zeros(m)
    for r in range(m - 1, -1, -1):
        acc = b[r]
        for j in range(r + 1, m):
            acc -= A[r, j] * x[j]
        x[r] = acc / A[r, r]
    return True, x


@njit(cache=True)
def _min_norm_simplex(W, k):
    """Minimum-norm point of conv(W[:k]) by enumerating faces.

    Returns the barycentric weights over the k vertices (zero off the
    supporting face).
    """
    best = np.inf
    best_lam = np.zeros(4)
    M = np.zeros((3, 3))
    rhs = np.zeros(3)
    idx = np.zeros(4, dtype=np.int64)
    for mask in range(1, 1 << k):
        m = 0
        for i in range(k):
            if mask & (1 << i):
                idx[m] = i
                m += 1
        lam = np.zeros(4)
        if m == 1:
            lam[idx[0]] = 1.0
        else:
            w0 = W[idx[0]]
            for a in range(m - 1):
                da = W[idx[a + 1]] - w0
                rhs[a] = -(da[0] * w0[0] + da[1] * w0[1] + da[2] * w0[2])
                for b in range(m - 1):
                    db = W[idx[b + 1]] - w0
                    M[a, b] = da[0] * db[0] + da[1] * db[1] + da[2] * db[2]
            ok, mu = _solve_small(M, rhs, m - 1)
            if not ok:
                continue
            s = 0.0
            valid = True
            for a in range(m - 1):
                if mu[a] < 0.0:
                    valid = False
                s += mu[a]
            if not valid or s > 1.0:
                continue
            lam[idx[0]] = 1.0 - s
            for a in range(m - 1):
                lam[idx[a + 1]] = mu[a]
        v0 = 0.0
        v1 = 0.0
        v2 = 0.0
        for i in range(k):
            v0 += lam[i] * W[i, 0]
            v1 += lam[i] * W[i, 1]
            v2 += lam[i] * W[i, 2]
        nrm = v0 * v0 + v1 * v1 + v2 * v2
        if nrm < best:
            best = nrm
            best_lam = lam
    return best_lam


@njit(cache=True)
def _gjk(A, B, inflate):
    """Closest points between conv(A) and conv(B) + box(inflate).

    Returns ``(distance, point_on_A, point_on_B)``; distance 0 when the sets
    intersect.
    """
    W = np.zeros((4, 3))
    PA = np.zeros((4, 3))
    PB = np.zeros((4, 3))
    d0 = A[0] - B[0]
    if d0[0] == 0.0 and d0[1] == 0.0 and d0[2] == 0.0:
        d0[0] = 1.0
    pa = _support(A, np.zeros(3), -d0)
    pb = _support(B, inflate, d0)
    W[0] = pa - pb
    PA[0] = pa
    PB[0] = pb
    k = 1
    v = W[0].copy()
    for _ in range(128):
        vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
        if vv <= 1e-24:
            return 0.0, PA[0], PA[0]
        pa = _support(A, np.zeros(3), -v)
        pb = _support(B, inflate, v)
        w = pa - pb
        vw = v[0] * w[0] + v[1] * w[1] + v[2] * w[2]
        if vv - vw <= 1e-12 * max(vv, 1e-12):
            break
        duplicate = False
        for i in range(k):
            if W[i, 0] == w[0] and W[i, 1] == w[1] and W[i, 2] == w[2]:
                duplicate = True
        if duplicate:
            break
        W[k] = w
        PA[k] = pa
        PB[k] = pb
        k += 1
        lam = _min_norm_simplex(W, k)
        nv = np.zeros(3)
        kk = 0
        for i in range(k):
            if lam[i] > 0.0:
                nv += lam[i] * W[i]
                W[kk] = W[i]
                PA[kk] = PA[i]
                PB[kk] = PB[i]
                lam[kk] = lam[i]
                kk += 1
        if kk == 4:
            return 0.0, PA[0], PA[0]
        nvv = nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]
        if nvv >= vv:
            # No progress: keep the previous estimate.
            k = kk
            break
        k = kk
        v = nv
    # Recover witness points from the final simplex.
    lam = _min_norm_simplex(W, k)
    qa = np.zeros(3)
    qb = np.zeros(3)
    for i in range(k):
        qa += lam[i] * PA[i]
        qb += lam[i] * PB[i]
    diff = qa - qb
    dist = math.sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
    return dist, qa, qb


@njit(cache=True)
def _plane(A, B, inflate, tol):
    """Max-margin plane with A in ``n.x <= d`` and inflated B beyond it.

    Returns ``(ok, n, d)``; ``ok`` is False when no plane with margin above
    ``tol`` exists.
    """
    dist, qa, qb = _gjk(A, B, inflate)
    n = np.zeros(3)
    if dist <= tol:
        return False, n, 0.0
    n = (qb - qa) / dist
    a_max = -np.inf
    for i in range(A.shape[0]):
        a_max = max(a_max, A[i, 0] * n[0] + A[i, 1] * n[1] + A[i, 2] * n[2])
    b_min = np.inf
    box = inflate[0] * abs(n[0]) + inflate[1] * abs(n[1]) + inflate[2] * abs(n[2])
    for i in range(B.shape[0]):
        b_min = min(b_min, B[i, 0] * n[0] + B[i, 1] * n[1] + B[i, 2] * n[2] - box)
    if b_min - a_max <= tol:
        return False, n, 0.0
    return True, n, 0.5 * (a_max + b_min)


@njit(cache=True)
def _subcurve(cps, u0, u1):
    out = np.empty((4, 3))
    tmp = np.empty((4, 3))
    for k in range(4):
        for i in range(4):
            tmp[i] = cps[i]
        n = 4
        for level in range(3):
            u = u0 if level < 3 - k else u1
            for i in range(n - 1):
                tmp[i] = (1.0 - u) * tmp[i] + u * tmp[i + 1]
            n -= 1
        out[k] = tmp[0]
    return out


@njit(cache=True)
def _piece_hull(times, cps, ta, tb):
    """Control points of a trajectory on ``[ta, tb]``, which must lie within one piece."""
    n = cps.shape[0]
    if ta >= times[n]:
        out = np.empty((1, 3))
        out[0] = cps[n - 1, 3]
        return out
    mid = 0.5 * (ta + tb) if tb < np.inf else ta
    i = np.searchsorted(times, mid, side="right") - 1
    if i < 0:
        i = 0
    if i > n - 1:
        i = n - 1
    h = times[i + 1] - times[i]
    u0 = (ta - times[i]) / h
    u1 = (tb - times[i]) / h
    if u0 <= 0.0 and u1 >= 1.0:
        return cps[i].copy()
    return _subcurve(cps[i], max(u0, 0.0), min(u1, 1.0))


@njit(cache=True)
def _breakpoints(times_a, times_b, ws, we):
    pts = np.concatenate((times_a, times_b))
    pts = np.sort(pts)
    out = np.empty(pts.shape[0] + 2)
    out[0] = ws
    m = 1
    for p in pts:
        if p > out[m - 1] and p < we:
            out[m] = p
            m += 1
    last_end = max(times_a[-1], times_b[-1])
    if we < np.inf:
        out[m] = we
        m += 1
    else:
        out[m] = np.inf
        m += 1
    return out[:m], last_end


@njit(cache=True)
def _pair_collides(times_a, cps_a, times_b, cps_b, ws, we, inflate, tol):
    bps, _ = _breakpoints(times_a, times_b, ws, we)
    for k in range(bps.shape[0] - 1):
        ta = bps[k]
        tb = bps[k + 1]
        ha = _piece_hull(times_a, cps_a, ta, tb)
        hb = _piece_hull(times_b, cps_b, ta, tb)
        separated = False
        for ax in range(3):
            amin = np.inf
            amax = -np.inf
            for i in range(ha.shape[0]):
                amin = min(amin, ha[i, ax])
                amax = max(amax, ha[i, ax])
            bmin = np.inf
            bmax = -np.inf
            for i in range(hb.shape[0]):
                bmin = min(bmin, hb[i, ax])
                bmax = max(bmax, hb[i, ax])
            if amax < bmin - inflate[ax] - tol or amin > bmax + inflate[ax] + tol:
                separated = True
                break
        if separated:
            continue
        ok, _, _ = _plane(ha, hb, inflate, tol)
        if not ok:
            return True
    return False


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def closest_points(hull_a, hull_b, inflate=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance and witness points between conv(hull_a) and conv(hull_b) + box."""
    a = np.ascontiguousarray(hull_a, dtype=float).reshape(-1, 3)
    b = np.ascontiguousarray(hull_b, dtype=float).reshape(-1, 3)
    infl = np.zeros(3) if inflate is None else np.asarray(inflate, dtype=float)
    dist, qa, qb = _gjk(a, b, infl)
    return float(dist), qa, qb


def compute_separating_plane(hull_a, hull_b, inflate=None) -> SeparatingPlane | None:
    """Maximum-margin plane separating two point hulls, or None if they intersect.

    ``inflate`` optionally Minkowski-adds an axis-aligned box with those half
    extents to ``hull_b``.  The returned plane keeps ``hull_a`` in
    ``normal . x <= offset`` and the (inflated) ``hull_b`` strictly beyond.
    """
    a = np.ascontiguousarray(hull_a, dtype=float).reshape(-1, 3)
    b = np.ascontiguousarray(hull_b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("hulls must be non-empty")
    infl = np.zeros(3) if inflate is None else np.asarray(inflate, dtype=float)
    ok, n, d = _plane(a, b, infl, SEPARATION_TOL)
    if not ok:
        return None
    return SeparatingPlane(n, float(d))


def check_pair_collision(
    traj_a: Trajectory, traj_b: Trajectory, box: BoundaryBox, window: tuple[float, float]
) -> bool:
    """Conservative continuous-time collision test over ``window``.

    Returns False only when every sub-interval between the union of both
    trajectories' segment boundaries has separated hulls.  ``window[1]`` may
    be ``inf`` to include the terminal holds.
    """
    ws, we = float(window[0]), float(window[1])
    if not we > ws:
        raise ValueError("empty time window")
    if ws < traj_a.t_start or ws < traj_b.t_start:
        raise ValueError("query before trajectory start")
    times_a, cps_a = traj_a.arrays()
    times_b, cps_b = traj_b.arrays()
    return bool(_pair_collides(times_a, cps_a, times_b, cps_b, ws, we, box.pairwise, SEPARATION_TOL))


def sampling_oracle_collision(
    traj_a: Trajectory, traj_b: Trajectory, box: BoundaryBox, window: tuple[float, float], dt: float
) -> bool:
    """Ground truth: do the boxes overlap at any sample ``t_start + k dt <= t_end``?"""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    ws, we = window
    n = int(math.floor((we - ws) / dt + 1e-9)) + 1
    times = ws + dt * np.arange(n)
    delta = np.abs(traj_a.positions(times) - traj_b.positions(times))
    return bool(np.any(np.all(delta < box.pairwise, axis=1)))
