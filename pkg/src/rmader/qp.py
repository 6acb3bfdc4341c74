"""Dense strictly convex QP solver (Goldfarb-Idnani dual active set).

Solves ``min 1/2 x'Gx + a'x  s.t.  C x <= h`` for a positive definite ``G``.
The dual method starts at the unconstrained minimum and adds violated
constraints one at a time, so it terminates exactly and reports infeasibility
cleanly, which the planner relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = ["QPResult", "solve_qp", "kkt_residual"]

STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_MAX_ITER = 2


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray | None
    status: str
    iterations: int
    active: np.ndarray
    multipliers: np.ndarray

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@njit(cache=True)
def _givens(a, b):
    r = np.hypot(a, b)
    if r == 0.0:
        return 1.0, 0.0, 0.0
    return a / r, b / r, r


@njit(cache=True)
def _gi_solve(G, a, N, b, max_iter, tol):
    """Core loop for ``min 1/2 x'Gx + a'x  s.t.  N[i] . x >= b[i]``."""
    n = G.shape[0]
    m = N.shape[0]
    L = np.linalg.cholesky(G)
    # J = L^{-T}
    Linv = np.linalg.inv(L)
    J = Linv.T.copy()
    x = -np.linalg.solve(G, a)
    R = np.zeros((n, n))
    active = np.full(n, -1, dtype=np.int64)
    u = np.zeros(n + 1)
    q = 0
    is_active = np.zeros(m, dtype=np.bool_)
    iters = 0
    status = STATUS_OPTIMAL
    while True:
        # step 1: most violated constraint
        s = N @ x - b
        p = -1
        worst = -tol
        for i in range(m):
            if not is_active[i] and s[i] < worst:
                worst = s[i]
                p = i
        if p < 0:
            break
        u[q] = 0.0
        np_ = N[p]
        while True:
            iters += 1
            if iters > max_iter:
                status = STATUS_MAX_ITER
                return x, status, iters, active[:q].copy(), u[:q].copy()
            d = J.T @ np_
            z = np.zeros(n)
            for j in range(q, n):
                z += J[:, j] * d[j]
            r = np.zeros(q)
            for i in range(q - 1, -1, -1):
                acc = d[i]
                for j in range(i + 1, q):
                    acc -= R[i, j] * r[j]
                r[i] = acc / R[i, i]
            t1 = np.inf
            l = -1
            for j in range(q):
                if r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        l = j
            zn = z @ np_
            znorm = np.sqrt(z @ z)
            sp = np_ @ x - b[p]
            if znorm <= 1e-13 or zn <= 1e-14:
                t2 = np.inf
            else:
                t2 = -sp / zn
            t = min(t1, t2)
            if t == np.inf:
                status = STATUS_INFEASIBLE
                return x, status, iters, active[:q].copy(), u[:q].copy()
            if t2 == np.inf:
                # dual step only, then drop constraint l
                for j in range(q):
                    u[j] -= t * r[j]
                u[q] += t
                q = _drop(J, R, active, u, is_active, q, l)
                continue
            x = x + t * z
            for j in range(q):
                u[j] -= t * r[j]
            u[q] += t
            if t == t2:
                # full step: add p
                for j in range(n - 1, q, -1):
                    c, sn, rr = _givens(d[j - 1], d[j])
                    if sn == 0.0:
                        continue
                    d[j - 1] = rr
                    d[j] = 0.0
                    for k in range(n):
                        ja = J[k, j - 1]
                        jb = J[k, j]
                        J[k, j - 1] = c * ja + sn * jb
                        J[k, j] = -sn * ja + c * jb
                for i in range(q + 1):
                    R[i, q] = d[i]
                active[q] = p
                is_active[p] = True
                q += 1
                break
            q = _drop(J, R, active, u, is_active, q, l)
    return x, status, iters, active[:q].copy(), u[:q].copy()


@njit(cache=True)
def _drop(J, R, active, u, is_active, q, l):
    """Remove the l-th active constraint; u[q] (the pending multiplier) shifts down."""
    n = J.shape[0]
    is_active[active[l]] = False
    for j in range(l, q - 1):
        active[j] = active[j + 1]
        for i in range(q):
            R[i, j] = R[i, j + 1]
    for j in range(l, q):
        u[j] = u[j + 1]
    for i in range(q):
        R[i, q - 1] = 0.0
    for j in range(l, q - 1):
        c, s, rr = _givens(R[j, j], R[j + 1, j])
        if s == 0.0:
            continue
        for k in range(j, q - 1):
            ra = R[j, k]
            rb = R[j + 1, k]
            R[j, k] = c * ra + s * rb
            R[j + 1, k] = -s * ra + c * rb
        for k in range(n):
            ja = J[k, j]
            jb = J[k, j + 1]
            J[k, j] = c * ja + s * jb
            J[k, j + 1] = -s * ja + c * jb
    active[q - 1] = -1
    return q - 1


def solve_qp(G, a, C=None, h=None, max_iter: int = 500, tol: float = 1e-10) -> QPResult:
    """Minimize ``1/2 x'Gx + a'x`` subject to ``C x <= h``.

    Constraint rows are normalized internally so ``tol`` is a distance.
    Multipliers are returned for the original (unnormalized) rows.
    """
    G = np.ascontiguousarray(G, dtype=float)
    a = np.ascontiguousarray(a, dtype=float)
    n = G.shape[0]
    if C is None or len(C) == 0:
        C = np.zeros((0, n))
        h = np.zeros(0)
    C = np.ascontiguousarray(C, dtype=float)
    h = np.ascontiguousarray(h, dtype=float)
    norms = np.linalg.norm(C, axis=1)
    if np.any(norms == 0.0):
        zero = norms == 0.0
        if np.any(h[zero] < 0.0):
            return QPResult(None, "infeasible", 0, np.zeros(0, dtype=np.int64), np.zeros(0))
        keep = ~zero
        idx_map = np.flatnonzero(keep)
        C, h, norms = C[keep], h[keep], norms[keep]
    else:
        idx_map = None
    N = -C / norms[:, None]
    b = -h / norms
    x, status, iters, active, u = _gi_solve(G, a, N, b, max_iter, tol)
    mult = u / norms[active] if len(active) else u
    if idx_map is not None:
        active = idx_map[active]
    name = {STATUS_OPTIMAL: "optimal", STATUS_INFEASIBLE: "infeasible", STATUS_MAX_ITER: "max_iter"}[status]
    return QPResult(x if status == STATUS_OPTIMAL else None, name, int(iters), active, mult)


def kkt_residual(G, a, C, h, x, active, multipliers) -> float:
    """Max of stationarity, primal infeasibility and dual infeasibility."""
    G = np.asarray(G, dtype=float)
    grad = G @ x + np.asarray(a, dtype=float)
    if len(active):
        grad = grad + np.asarray(C)[active].T @ multipliers
    stat = float(np.max(np.abs(grad))) if grad.size else 0.0
    prim = float(max(0.0, np.max(np.asarray(C) @ x - np.asarray(h)))) if len(C) else 0.0
    dual = float(max(0.0, -np.min(multipliers))) if len(multipliers) else 0.0
    return max(stat, prim, dual)
