import math

import numpy as np
import pytest
from hypothesis import settings

from rmader.trajectory import PolySegment, Trajectory

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_trajectory(rng, n_seg=None, t0=0.0, spread=3.0, step=1.0, center=None):
    """Position-continuous random Bezier trajectory."""
    n_seg = int(rng.integers(1, 5)) if n_seg is None else n_seg
    p = (np.zeros(3) if center is None else np.asarray(center, float)) + rng.uniform(-spread, spread, 3)
    t = t0
    segs = []
    for _ in range(n_seg):
        h = float(rng.uniform(0.1, 1.0))
        cps = [p]
        for _ in range(3):
            cps.append(cps[-1] + rng.normal(0.0, step, 3))
        segs.append(PolySegment(t, t + h, np.array(cps)))
        p = cps[-1]
        t += h
    return Trajectory(segs)


def power_coeffs(seg):
    """Monomial coefficients (in local time s = t - t0) of a cubic Bezier, per axis.

    Independent of the Bezier evaluation code: expands the Bernstein basis
    symbolically.
    """
    h = seg.t1 - seg.t0
    p0, p1, p2, p3 = np.asarray(seg.cps)
    c0 = p0
    c1 = 3 * (p1 - p0)
    c2 = 3 * (p2 - 2 * p1 + p0)
    c3 = p3 - 3 * p2 + 3 * p1 - p0
    # p(u) = c0 + c1 u + c2 u^2 + c3 u^3 with u = s / h
    return np.stack([c0, c1 / h, c2 / h**2, c3 / h**3])  # (4, 3), ascending powers of s


def poly_state(seg, t):
    c = power_coeffs(seg)
    s = t - seg.t0
    pos = c[0] + c[1] * s + c[2] * s**2 + c[3] * s**3
    vel = c[1] + 2 * c[2] * s + 3 * c[3] * s**2
    acc = 2 * c[2] + 6 * c[3] * s
    return pos, vel, acc


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def circle(n=10, r=10.0, z=1.0):
    from rmader.netsim import AgentSpec

    out = []
    for i in range(n):
        th = 2 * math.pi * i / n
        out.append(AgentSpec((r * math.cos(th), r * math.sin(th), z), (-r * math.cos(th), -r * math.sin(th), z)))
    return tuple(out)


def random_plan_request(rng, n_peers, config=None):
    """Start state and goal in the plane z=1 with peers scattered near the path."""
    from rmader.geometry import BoundaryBox
    from rmader.planner import PlannerConfig, make_request
    from rmader.trajectory import DynamicLimits, StateSample

    config = config or PlannerConfig()
    box = BoundaryBox()
    t_switch = float(rng.uniform(0.0, 5.0))
    p0 = np.array([0.0, 0.0, 1.0]) + np.r_[rng.uniform(-1, 1, 2), 0.0]
    v0 = np.r_[rng.uniform(-1.5, 1.5, 2), 0.0]
    a0 = np.r_[rng.uniform(-1.0, 1.0, 2), 0.0]
    ang = rng.uniform(0, 2 * np.pi)
    goal = p0 + rng.uniform(2.0, 8.0) * np.array([np.cos(ang), np.sin(ang), 0.0])
    peers = []
    while len(peers) < n_peers:
        center = p0 + rng.uniform(0.2, 1.0) * (goal - p0) + np.r_[rng.normal(0, 1.5, 2), 0.0]
        if np.all(np.abs(center - p0) < box.pairwise + 0.3):
            continue  # keep the start box clear
        traj = random_trajectory(rng, n_seg=int(rng.integers(1, 4)), t0=t_switch - 0.2, spread=0.0, step=0.25, center=center)
        peers.append((len(peers) + 1, traj))
    start = StateSample(t_switch, p0, v0, a0)
    return make_request(start, goal, DynamicLimits(), peers, box, config)
