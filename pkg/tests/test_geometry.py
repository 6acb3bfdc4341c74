import itertools
import math

import numpy as np
import pytest
from conftest import random_trajectory
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog, minimize

from rmader.geometry import (
    BoundaryBox,
    SeparatingPlane,
    boxes_collide,
    check_pair_collision,
    closest_points,
    compute_separating_plane,
    sampling_oracle_collision,
)
from rmader.trajectory import PolySegment, Trajectory, constant_trajectory

BOX = BoundaryBox()
seeds = st.integers(0, 2**32 - 1)


def inflate_points(B, half):
    corners = np.array(list(itertools.product(*[(-h, h) for h in half])))
    return (B[:, None, :] + corners[None, :, :]).reshape(-1, 3)


def lp_separable(A, B):
    """Strict separability via LP: exists n, d with n.a <= d - 1 and n.b >= d + 1."""
    # variables n (3), d (1)
    rows = [np.r_[a, -1.0] for a in A] + [np.r_[-b, 1.0] for b in B]
    res = linprog(np.zeros(4), A_ub=np.array(rows), b_ub=-np.ones(len(rows)), bounds=[(None, None)] * 4, method="highs")
    return res.status == 0


def hull_distance(A, B):
    """Distance between convex hulls by direct minimization over convex weights."""
    na, nb = len(A), len(B)

    def f(w):
        d = w[:na] @ A - w[na:] @ B
        return d @ d

    cons = [
        {"type": "eq", "fun": lambda w: np.sum(w[:na]) - 1.0},
        {"type": "eq", "fun": lambda w: np.sum(w[na:]) - 1.0},
    ]
    x0 = np.r_[np.full(na, 1.0 / na), np.full(nb, 1.0 / nb)]
    res = minimize(f, x0, method="SLSQP", bounds=[(0, 1)] * (na + nb), constraints=cons, options={"ftol": 1e-14, "maxiter": 500})
    return math.sqrt(max(res.fun, 0.0))


def test_pairwise_box():
    np.testing.assert_allclose(BOX.pairwise, [0.8, 0.8, 1.5])
    assert BoundaryBox.from_full_extents(0.8, 0.8, 1.5) == BOX
    with pytest.raises(ValueError):
        BoundaryBox((0.4, 0.0, 0.7))


def test_boxes_collide_examples():
    assert not boxes_collide((0, 0, 0), (10, 0, 0), BOX)
    assert boxes_collide((1, 2, 3), (1, 2, 3), BOX)
    assert boxes_collide((0, 0, 0), (0.79, 0, 0), BOX)
    assert not boxes_collide((0, 0, 0), (0.81, 0, 0), BOX)
    assert boxes_collide((0, 0, 0), (0, 0, 1.49), BOX)
    assert not boxes_collide((0, 0, 0), (0, 0, 1.51), BOX)


@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_boxes_collide_symmetric(v):
    p, q = v[:3], v[3:]
    assert boxes_collide(p, q, BOX) == boxes_collide(q, p, BOX)
    ref = all(abs(a - b) < h for a, b, h in zip(p, q, BOX.pairwise))
    assert boxes_collide(p, q, BOX) == ref


def test_plane_between_points():
    pl = compute_separating_plane([[0, 0, 0]], [[2, 0, 0]])
    np.testing.assert_allclose(pl.normal, [1, 0, 0], atol=1e-12)
    assert pl.offset == pytest.approx(1.0)


def test_plane_none_when_intersecting():
    A = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2]], float)
    assert compute_separating_plane(A, A + 0.1) is None
    assert compute_separating_plane(A, A) is None


def test_plane_rejects_bad_normal():
    with pytest.raises(ValueError):
        SeparatingPlane(np.array([1.0, 1.0, 0.0]), 0.0)


@given(seeds, st.booleans())
def test_plane_agrees_with_lp(seed, inflate):
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 1, (int(rng.integers(1, 9)), 3))
    B = rng.normal(0, 1, (int(rng.integers(1, 9)), 3)) + rng.normal(0, 2.5, 3)
    half = BOX.pairwise if inflate else None
    Bi = inflate_points(B, half) if inflate else B
    pl = compute_separating_plane(A, B, half)
    separable = lp_separable(A, Bi)
    if pl is None:
        # a miss is only allowed when the hulls touch or intersect
        assert not separable or hull_distance(A, Bi) < 1e-6
    else:
        assert separable
        assert np.max(pl.signed_distance(A)) < 0.0 < np.min(pl.signed_distance(Bi))


@given(seeds)
def test_closest_points_distance(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 1, (int(rng.integers(1, 7)), 3))
    B = rng.normal(0, 1, (int(rng.integers(1, 7)), 3)) + rng.normal(0, 3, 3)
    dist, qa, qb = closest_points(A, B)
    ref = hull_distance(A, B)
    assert dist == pytest.approx(ref, abs=1e-5)
    assert np.linalg.norm(qa - qb) == pytest.approx(dist, abs=1e-9)


def line(p0, p1, t0=0.0, t1=1.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    return Trajectory([PolySegment(t0, t1, [p0 + (p1 - p0) * k / 3 for k in range(4)])])


def test_parallel_lines_clear():
    a = line((0, 0, 0), (10, 0, 0))
    b = line((0, 10, 0), (10, 10, 0))
    assert not check_pair_collision(a, b, BOX, (0.0, math.inf))


def test_identical_trajectories_collide():
    a = line((0, 0, 0), (10, 0, 0))
    assert check_pair_collision(a, a, BOX, (0.0, 1.0))
    c = constant_trajectory((1, 1, 1), 0.0)
    assert sampling_oracle_collision(c, c, BOX, (0.0, 1.0), 0.001)


def test_crossing_at_center():
    a = line((-5, 0, 1), (5, 0, 1), 0, 2)
    b = line((0, -5, 1), (0, 5, 1), 0, 2)
    assert check_pair_collision(a, b, BOX, (0.0, math.inf))
    assert sampling_oracle_collision(a, b, BOX, (0.0, 2.0), 0.001)


def test_near_miss():
    # closest approach in y is 0.81 > 0.8, so no overlap at any instant
    a = line((-5, 0, 1), (5, 0, 1), 0, 2)
    b = line((5, 0.81, 1), (-5, 0.81, 1), 0, 2)
    assert not sampling_oracle_collision(a, b, BOX, (0.0, 2.0), 0.001)
    assert not check_pair_collision(a, b, BOX, (0.0, math.inf))


def test_window_errors():
    a = line((0, 0, 0), (1, 0, 0))
    with pytest.raises(ValueError, match="empty time window"):
        check_pair_collision(a, a, BOX, (0.5, 0.5))
    with pytest.raises(ValueError):
        sampling_oracle_collision(a, a, BOX, (0.0, 1.0), 0.0)


@given(seeds)
def test_checker_sound(seed):
    rng = np.random.default_rng(seed)
    a = random_trajectory(rng, spread=1.5, step=0.6)
    b = random_trajectory(rng, spread=1.5, step=0.6)
    end = max(a.t_end, b.t_end) + 0.01
    if not check_pair_collision(a, b, BOX, (0.0, math.inf)):
        assert not sampling_oracle_collision(a, b, BOX, (0.0, end), 0.001)
