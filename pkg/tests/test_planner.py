import dataclasses
import math

import numpy as np
import pytest
from conftest import random_plan_request
from hypothesis import given
from hypothesis import strategies as st

from rmader.geometry import BoundaryBox, check_pair_collision, sampling_oracle_collision
from rmader.planner import (
    Infeasible,
    PlannerConfig,
    PlanRequest,
    bspline_basis,
    choose_segment_duration,
    initial_guess,
    make_request,
    plan,
)
from rmader.trajectory import DynamicLimits, StateSample, constant_trajectory

seeds = st.integers(0, 2**32 - 1)


def rest(p, t=0.0):
    return StateSample(t, np.asarray(p, float), np.zeros(3), np.zeros(3))


def spline_min_jerk(p0, goal, n, h):
    """Minimum jerk integral over C2 piecewise cubics with n pieces of length h,
    rest at both ends.  Solved per axis in the power basis from its KKT system,
    without any B-spline or Bezier machinery."""
    total = 0.0
    for axis in range(3):
        nv = 4 * n  # c0..c3 of each piece in local time s in [0, h]
        rows, rhs = [], []

        def val(i, s, d):
            r = np.zeros(nv)
            for k in range(d, 4):
                r[4 * i + k] = math.factorial(k) / math.factorial(k - d) * s ** (k - d)
            return r

        for d, v in ((0, p0[axis]), (1, 0.0), (2, 0.0)):
            rows.append(val(0, 0.0, d))
            rhs.append(v)
            rows.append(val(n - 1, h, d))
            rhs.append(goal[axis] if d == 0 else 0.0)
        for i in range(n - 1):
            for d in range(3):
                rows.append(val(i, h, d) - val(i + 1, 0.0, d))
                rhs.append(0.0)
        A, b = np.array(rows), np.array(rhs)
        Q = np.zeros((nv, nv))
        for i in range(n):
            Q[4 * i + 3, 4 * i + 3] = 2 * 36.0 * h
        K = np.block([[Q, A.T], [A, np.zeros((len(A), len(A)))]])
        sol = np.linalg.lstsq(K, np.r_[np.zeros(nv), b], rcond=None)[0]
        c = sol[:nv]
        total += 0.5 * c @ Q @ c
    return total


def verify(res, req):
    """Re-derive limits and plane signs from the raw control points."""
    lim = req.limits
    for seg in res.trajectory.segments:
        P, h = np.asarray(seg.cps), seg.duration
        v = 3 * np.diff(P, axis=0) / h
        a = 6 * np.diff(P, 2, axis=0) / h**2
        j = 6 * np.diff(P, 3, axis=0) / h**3
        assert np.max(np.abs(v)) <= lim.v_max
        assert np.max(np.abs(a)) <= lim.a_max
        assert np.max(np.abs(j)) <= lim.j_max
    segs = res.trajectory.segments
    for piece, _peer, plane in res.planes_used:
        pts = np.asarray(segs[piece].cps) if piece < len(segs) else res.trajectory.terminal_hold[None, :]
        assert np.all(pts @ plane.normal < plane.offset)


def test_unconstrained_matches_min_jerk():
    cfg = PlannerConfig()
    req = make_request(rest((0, 0, 0)), (5, 0, 0), DynamicLimits(), config=cfg)
    res = plan(req, cfg)
    assert res
    end = res.trajectory.terminal_hold
    assert np.linalg.norm(end - [5, 0, 0]) < 1e-3
    jerk = res.cost - res.goal_cost
    ref = spline_min_jerk(np.zeros(3), np.array([5.0, 0, 0]), req.num_segments, req.segment_duration)
    assert jerk == pytest.approx(ref, rel=1e-4)


@given(seeds)
def test_unconstrained_random(seed):
    rng = np.random.default_rng(seed)
    p0 = rng.uniform(-5, 5, 3)
    goal = p0 + rng.uniform(-6, 6, 3)
    lim = DynamicLimits(100.0, 1000.0, 10000.0)
    req = make_request(rest(p0), goal, lim)
    res = plan(req)
    # the soft-goal optimum is the hard-constrained optimum at the endpoint it reaches
    end = res.trajectory.terminal_hold
    ref = spline_min_jerk(p0, end, req.num_segments, req.segment_duration)
    assert res.cost - res.goal_cost == pytest.approx(ref, rel=1e-6)


def test_goal_equals_start():
    req = make_request(rest((1, 2, 3)), (1, 2, 3), DynamicLimits())
    res = plan(req)
    assert res.cost == pytest.approx(0.0, abs=1e-12)
    for seg in res.trajectory.segments:
        np.testing.assert_allclose(seg.cps, np.tile([1, 2, 3], (4, 1)), atol=1e-12)


def test_static_peer_on_path():
    box = BoundaryBox()
    peer = constant_trajectory((2.5, 0, 0), -1.0)
    req = make_request(rest((0, 0, 0)), (5, 0, 0), DynamicLimits(), [(7, peer)], box)
    res = plan(req)
    assert res, res
    verify(res, req)
    assert not check_pair_collision(res.trajectory, peer, box, (0.0, math.inf))
    assert not sampling_oracle_collision(res.trajectory, peer, box, (0.0, res.trajectory.t_end + 0.1), 0.001)
    assert {p for _, p, _ in res.planes_used} == {7}


@given(seeds, st.integers(1, 5))
def test_random_requests_verified(seed, n_peers):
    rng = np.random.default_rng(seed)
    req = random_plan_request(rng, n_peers)
    res = plan(req)
    if isinstance(res, Infeasible):
        assert not res
        return
    verify(res, req)
    traj = res.trajectory
    s = traj.evaluate(req.t_switch)
    np.testing.assert_allclose(s.position, req.start.position, atol=1e-6)
    np.testing.assert_allclose(s.velocity, req.start.velocity, atol=1e-6)
    np.testing.assert_allclose(s.acceleration, req.start.acceleration, atol=1e-6)
    assert traj.is_c2_continuous(1e-6)
    for _, peer in req.constraints:
        assert not check_pair_collision(traj, peer, req.box, (req.t_switch, math.inf))


def test_feasible_fraction():
    rng = np.random.default_rng(7)
    ok = sum(bool(plan(random_plan_request(rng, int(rng.integers(1, 6))))) for _ in range(60))
    assert ok >= 40


@given(seeds)
def test_deterministic(seed):
    rng = np.random.default_rng(seed)
    req = random_plan_request(rng, 2)
    a, b = plan(req), plan(req)
    assert type(a) is type(b)
    if a:
        for sa, sb in zip(a.trajectory.segments, b.trajectory.segments):
            assert np.array_equal(sa.cps, sb.cps)


@given(seeds, st.integers(0, 2))
def test_goal_weight_monotone(seed, n_peers):
    rng = np.random.default_rng(seed)
    req = dataclasses.replace(random_plan_request(rng, n_peers), w_goal=50.0)
    lo = plan(req)
    hi = plan(dataclasses.replace(req, w_goal=100.0))
    if not (lo and hi):
        return
    d_lo = lo.goal_cost / 50.0
    d_hi = hi.goal_cost / 100.0
    assert d_hi <= d_lo + 1e-9


def test_initial_guess():
    lim = DynamicLimits(1e3, 1e3, 1e3)
    req = make_request(rest((0, 0, 0)), (1, 0, 0), lim)
    g = initial_guess(req)
    np.testing.assert_allclose(g.terminal_hold, [1, 0, 0], atol=1e-12)
    same = initial_guess(make_request(rest((2, 2, 2)), (2, 2, 2), lim))
    for seg in same.segments:
        np.testing.assert_allclose(seg.cps, np.tile([2, 2, 2], (4, 1)))
    moving = StateSample(0.0, np.zeros(3), np.array([0.0, 2.0, 0.0]), np.zeros(3))
    g = initial_guess(make_request(moving, (4, 0, 0), DynamicLimits()))
    eps = 1e-6
    fd = (g.position(eps) - g.position(0.0)) / eps
    np.testing.assert_allclose(fd, [0, 2, 0], atol=1e-4)


def test_segment_duration_bounds():
    cfg = PlannerConfig()
    lim = DynamicLimits()
    near = choose_segment_duration(rest((0, 0, 0)), (0.1, 0, 0), lim, cfg)
    far = choose_segment_duration(rest((0, 0, 0)), (500, 0, 0), lim, cfg)
    assert near * cfg.num_segments == pytest.approx(cfg.horizon_min)
    assert far * cfg.num_segments == pytest.approx(cfg.horizon_max)


def test_bspline_basis_partition_of_unity():
    B = bspline_basis(4)
    np.testing.assert_allclose(B.sum(axis=1), 1.0)


def test_malformed_request():
    lim = DynamicLimits()
    good = make_request(rest((0, 0, 0)), (1, 0, 0), lim)
    with pytest.raises(ValueError):
        plan(dataclasses.replace(good, num_segments=1))
    with pytest.raises(ValueError):
        plan(dataclasses.replace(good, segment_duration=0.0))
    with pytest.raises(ValueError):
        plan(dataclasses.replace(good, t_switch=1.0))
    with pytest.raises(ValueError):
        plan(dataclasses.replace(good, goal=np.zeros(2)))
    assert isinstance(good, PlanRequest)
