"""Dense active-set solver for small strictly convex QPs, with an exact
linear-program front end built on the same machinery.

Problems have the form

    minimize   0.5 z' H z + c' z
    subject to G z <= h

with H positive definite and at most a few dozen rows, which covers every
optimization this package poses.  The LP front end solves a Tikhonov
regularized QP, reads off the active face, and certifies the exact LP
value through the nonnegative least-squares multipliers of that face.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls


class QpError(RuntimeError):
    pass


class InfeasibleError(QpError):
    """No point satisfies the constraints (detected by phase 1)."""


class MaxIterationsError(QpError):
    pass


@dataclass
class QpResult:
    z: np.ndarray
    objective: float
    multipliers: np.ndarray      # one per row, zero off the active set
    active: list[int]
    iterations: int
    status: str = "optimal"


@dataclass
class LpResult:
    z: np.ndarray
    value: float
    multipliers: np.ndarray
    active: list[int]
    status: str = "optimal"


def _kkt_solve(H, G_W, rhs_top, rhs_bot):
    """Solve the bordered system [[H, G_W'], [G_W, 0]] [p; mu] = [rhs]."""
    nw = G_W.shape[0]
    n = H.shape[0]
    K = np.zeros((n + nw, n + nw))
    K[:n, :n] = H
    if nw:
        K[:n, n:] = G_W.T
        K[n:, :n] = G_W
    sol = np.linalg.solve(K, np.concatenate([rhs_top, rhs_bot]))
    return sol[:n], sol[n:]


def max_violation(G, h, z) -> float:
    if G.shape[0] == 0:
        return 0.0
    return float(np.max(G @ z - h))


def solve_qp(H, c, G, h, z0, working=None, tol: float = 1e-9,
             max_iters: int = 200) -> QpResult:
    """Primal active-set iteration from a feasible starting point.

    ``working`` optionally seeds the working set (row indices); rows that
    are not active at ``z0`` are dropped from the seed.  Raises
    ``MaxIterationsError`` if the iteration budget is exhausted.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float)) if np.size(G) else np.zeros((0, c.size))
    h = np.asarray(h, dtype=float).reshape(G.shape[0])
    z = np.asarray(z0, dtype=float).copy()
    m = G.shape[0]

    viol = max_violation(G, h, z)
    if viol > 10 * tol:
        raise QpError(f"starting point infeasible by {viol:.3g}")

    W: list[int] = []
    if working:
        for i in working:
            if 0 <= i < m and abs(G[i] @ z - h[i]) <= 100 * tol:
                W.append(i)

    for it in range(1, max_iters + 1):
        grad = H @ z + c
        G_W = G[W] if W else np.zeros((0, z.size))
        try:
            p, mu = _kkt_solve(H, G_W, -grad, np.zeros(len(W)))
        except np.linalg.LinAlgError:
            if not W:
                raise
            W.pop()  # redundant working set, drop the most recent addition
            continue

        if np.linalg.norm(p) <= tol * (1.0 + np.linalg.norm(z)):
            if not W or np.min(mu) >= -tol:
                lam = np.zeros(m)
                for k, i in enumerate(W):
                    lam[i] = max(mu[k], 0.0)
                obj = 0.5 * z @ H @ z + c @ z
                return QpResult(z=z, objective=float(obj), multipliers=lam,
                                active=sorted(W), iterations=it)
            W.pop(int(np.argmin(mu)))
            continue

        # ratio test over rows outside the working set
        alpha = 1.0
        blocker = -1
        for i in range(m):
            if i in W:
                continue
            gi_p = G[i] @ p
            if gi_p > tol:
                a = (h[i] - G[i] @ z) / gi_p
                if a < alpha:
                    alpha = max(a, 0.0)
                    blocker = i
        z = z + alpha * p
        if blocker >= 0:
            W.append(blocker)

    raise MaxIterationsError(f"active-set iteration did not finish in {max_iters} steps")


def solve_lp(c, G, h, z0, tol: float = 1e-9, max_iters: int = 200) -> LpResult:
    """Exact LP minimum via a regularized QP plus dual certification.

    Solves min c'z s.t. Gz <= h starting from the feasible ``z0``.  A small
    ridge makes the problem strictly convex; the resulting active face is
    certified by solving G_A' lam = -c with lam >= 0, which pins the exact
    optimal value c'z on that face.  The ridge shrinks until the
    certificate holds.
    """
    c = np.asarray(c, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.asarray(h, dtype=float).reshape(G.shape[0])
    scale = max(1.0, float(np.max(np.abs(c))))

    rho = 1e-7 * scale
    last_err = None
    for _ in range(4):
        H = 2.0 * rho * np.eye(c.size)
        try:
            res = solve_qp(H, c, G, h, z0, tol=tol, max_iters=max_iters)
        except MaxIterationsError as exc:
            last_err = exc
            rho *= 1e-2
            continue
        A = res.active
        if not A:
            if np.linalg.norm(c) <= tol:
                return LpResult(z=res.z, value=float(c @ res.z),
                                multipliers=np.zeros(G.shape[0]), active=[])
            rho *= 1e-3
            continue
        lam_A, rnorm = nnls(G[A].T, -c)
        if rnorm <= 1e-8 * scale:
            lam = np.zeros(G.shape[0])
            lam[A] = lam_A
            value = float(c @ res.z)
            dual = float(-lam_A @ h[A])
            if abs(value - dual) > 1e-6 * max(1.0, abs(value)):
                # active point drifted off the face; trust the dual value
                value = dual
            return LpResult(z=res.z, value=value, multipliers=lam, active=A)
        rho *= 1e-3
    raise QpError(f"LP certification failed (last ridge {rho:.1e}): {last_err}")


def find_feasible_point(G, h, z_probe, tol: float = 1e-9):
    """Phase 1: return a point with Gz <= h + tol, or raise InfeasibleError.

    Minimizes the worst violation s with the auxiliary LP
    min s  s.t.  Gz - s <= h,  -s <= 1.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.asarray(h, dtype=float).reshape(G.shape[0])
    z_probe = np.asarray(z_probe, dtype=float)
    if max_violation(G, h, z_probe) <= tol:
        return z_probe
    d = z_probe.size
    G_aug = np.hstack([G, -np.ones((G.shape[0], 1))])
    G_aug = np.vstack([G_aug, np.concatenate([np.zeros(d), [-1.0]])])
    h_aug = np.concatenate([h, [1.0]])
    c = np.zeros(d + 1)
    c[-1] = 1.0
    s0 = max(max_violation(G, h, z_probe), 0.0) + 1.0
    res = solve_lp(c, G_aug, h_aug, np.concatenate([z_probe, [s0]]), tol=tol)
    if res.value > 10 * tol:
        raise InfeasibleError(f"constraints infeasible, best slack {res.value:.3g}")
    return res.z[:d]
