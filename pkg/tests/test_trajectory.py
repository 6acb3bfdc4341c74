import json

import numpy as np
import pytest
from conftest import poly_state, power_coeffs, random_trajectory
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from rmader.trajectory import (
    DynamicLimits,
    PolySegment,
    Trajectory,
    bezier_subcurve,
    check_limits,
    constant_trajectory,
    count_stops,
    evaluate,
    smoothness_integrals,
)

seeds = st.integers(0, 2**32 - 1)


def cubic_t3():
    # p(t) = t^3 along x on [0, 1]
    return Trajectory([PolySegment(0.0, 1.0, [[0, 0, 0], [0, 0, 0], [0, 0, 0], [1, 0, 0]])])


def test_t_cubed_integrals():
    s = smoothness_integrals(cubic_t3())
    assert s["accel_integral"] == pytest.approx(12.0, rel=1e-9)
    assert s["jerk_integral"] == pytest.approx(36.0, rel=1e-9)


def test_t_cubed_state():
    st_ = evaluate(cubic_t3(), 0.5)
    assert st_.position[0] == pytest.approx(0.125)
    assert st_.velocity[0] == pytest.approx(0.75)
    assert st_.acceleration[0] == pytest.approx(3.0)


@given(seeds)
def test_evaluate_matches_power_basis(seed):
    rng = np.random.default_rng(seed)
    traj = random_trajectory(rng)
    for t in rng.uniform(traj.t_start, traj.t_end, 5):
        seg = traj.segments[traj.segment_index(t)]
        ref = poly_state(seg, t)
        got = evaluate(traj, t)
        np.testing.assert_allclose(got.position, ref[0], atol=1e-9)
        np.testing.assert_allclose(got.velocity, ref[1], atol=1e-8)
        np.testing.assert_allclose(got.acceleration, ref[2], atol=1e-7)
        np.testing.assert_allclose(traj.position(t), ref[0], atol=1e-9)


@given(seeds)
def test_vectorized_positions_agree(seed):
    rng = np.random.default_rng(seed)
    traj = random_trajectory(rng)
    times = np.sort(rng.uniform(traj.t_start, traj.t_end + 1.0, 20))
    ref = np.array([traj.position(t) for t in times])
    np.testing.assert_allclose(traj.positions(times), ref, atol=1e-12)


def test_smoothness_matches_quadrature(rng):
    for _ in range(30):
        traj = random_trajectory(rng)
        acc = jerk = 0.0
        for seg in traj.segments:
            c = power_coeffs(seg)
            acc += quad(lambda s: float(np.sum((2 * c[2] + 6 * c[3] * s) ** 2)), 0.0, seg.duration, epsabs=0, epsrel=1e-12)[0]
            jerk += quad(lambda s: float(np.sum((6 * c[3]) ** 2)), 0.0, seg.duration, epsabs=0, epsrel=1e-12)[0]
        got = smoothness_integrals(traj)
        assert got["accel_integral"] == pytest.approx(acc, rel=1e-6)
        assert got["jerk_integral"] == pytest.approx(jerk, rel=1e-6)


def test_terminal_hold():
    traj = cubic_t3()
    s = evaluate(traj, 10.0)
    np.testing.assert_array_equal(s.position, [1, 0, 0])
    np.testing.assert_array_equal(s.velocity, 0)
    np.testing.assert_array_equal(s.acceleration, 0)


def test_query_before_start():
    with pytest.raises(ValueError):
        evaluate(cubic_t3(), -0.1)


def test_noncontiguous_rejected():
    a = PolySegment(0, 1, np.zeros((4, 3)))
    b = PolySegment(1.5, 2, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        Trajectory([a, b])
    with pytest.raises(ValueError):
        PolySegment(1.0, 1.0, np.zeros((4, 3)))


@given(seeds, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_subcurve_reparameterizes(seed, a, b):
    rng = np.random.default_rng(seed)
    cps = rng.normal(size=(4, 3))
    u0, u1 = min(a, b), max(a, b)
    sub = bezier_subcurve(cps, u0, u1)
    for w in (0.0, 0.3, 1.0):
        u = u0 + w * (u1 - u0)
        ref = PolySegment(0, 1, cps).position(u)
        np.testing.assert_allclose(PolySegment(0, 1, sub).position(w), ref, atol=1e-10)


@given(seeds)
def test_then_and_truncate(seed):
    rng = np.random.default_rng(seed)
    base = random_trajectory(rng, n_seg=3)
    t_cut = float(rng.uniform(base.t_start + 0.05, base.t_end + 0.5))
    suffix = random_trajectory(rng, n_seg=2, t0=t_cut)
    out = base.then(suffix)
    assert out.t_start == base.t_start and out.t_end == suffix.t_end
    for t in rng.uniform(base.t_start, t_cut, 5):
        np.testing.assert_allclose(out.position(t), base.position(t), atol=1e-9)
    for t in rng.uniform(t_cut, suffix.t_end, 5):
        np.testing.assert_allclose(out.position(t), suffix.position(t), atol=1e-9)


def test_trim_before_keeps_future():
    rng = np.random.default_rng(1)
    traj = random_trajectory(rng, n_seg=4)
    t = traj.boundaries[2] + 0.01
    trimmed = traj.trim_before(t)
    assert trimmed.t_start <= t
    assert len(trimmed) == 2
    np.testing.assert_allclose(trimmed.position(t), traj.position(t))
    assert len(traj.trim_before(traj.t_end + 5)) == 1


@given(seeds)
def test_json_round_trip(seed):
    traj = random_trajectory(np.random.default_rng(seed))
    data = json.loads(json.dumps(traj.to_dict()))
    assert set(data) == {"segments"}
    assert set(data["segments"][0]) == {"t0", "t1", "cps"}
    back = Trajectory.from_dict(data)
    for a, b in zip(back.segments, traj.segments):
        assert a.t0 == b.t0 and a.t1 == b.t1
        np.testing.assert_array_equal(a.cps, b.cps)


def test_check_limits():
    lim = DynamicLimits(1.0, 10.0, 100.0)
    # straight line at 0.9 m/s, then at 1.2 m/s
    slow = Trajectory([PolySegment(0, 1, np.outer(np.linspace(0, 0.9, 4), [1, 0, 0]))])
    fast = Trajectory([PolySegment(0, 1, np.outer(np.linspace(0, 1.2, 4), [1, 0, 0]))])
    assert check_limits(slow, lim)
    assert not check_limits(fast, lim)
    assert not check_limits(cubic_t3(), DynamicLimits(10, 10, 5.0))  # jerk 6
    with pytest.raises(ValueError):
        DynamicLimits(0, 1, 1)


def _move(t0, p0, p1, h):
    return PolySegment(t0, t0 + h, np.array([p0, p0, p1, p1], dtype=float))


def test_count_stops():
    a, b, c = np.zeros(3), np.array([2.0, 0, 0]), np.array([4.0, 0, 0])
    pause = 0.5
    segs = [_move(0, a, b, 1.0), PolySegment(1.0, 1.0 + pause, np.tile(b, (4, 1))), _move(1.0 + pause, b, c, 1.0)]
    assert count_stops(Trajectory(segs)) == 1
    short = [_move(0, a, b, 1.0), PolySegment(1.0, 1.05, np.tile(b, (4, 1))), _move(1.05, b, c, 1.0)]
    assert count_stops(Trajectory(short)) == 0
    # leading hover and final rest are not stops
    hover = [PolySegment(0, 2, np.tile(a, (4, 1))), _move(2, a, b, 1.0), PolySegment(3, 5, np.tile(b, (4, 1)))]
    assert count_stops(Trajectory(hover)) == 0


def test_constant_trajectory():
    traj = constant_trajectory([1, 2, 3], 0.5)
    assert traj.t_start == 0.5
    np.testing.assert_array_equal(traj.position(100.0), [1, 2, 3])
    assert smoothness_integrals(traj) == {"accel_integral": 0.0, "jerk_integral": 0.0}
