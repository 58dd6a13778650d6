"""Geometric compatibility checks between task gradient rows at a state.

Four nested notions, all driven by the rows lg_i = grad J_i(x)' g(x):

* orthogonal              -- nonzero rows pairwise perpendicular
* independent             -- nonzero rows linearly independent
* concurrently controllable -- no two subset sums of rows are antiparallel
* concurrently executable -- a single input strictly decreases every task
                             that is not already finished

Executability is decided exactly through the bounded linear program

    minimize t  s.t.  lf_i + lg_i . u <= t,  |u|_inf <= input_bound

over the tasks with value above ``value_tol``: a minimum below ``-margin``
yields a witness input, otherwise the LP multipliers give nonnegative
weights lam with sum(lam_i lg_i) ~ 0 and sum(lam_i (lf_i + margin)) >= 0,
certifying that no strictly decreasing input exists.

Orthogonal rows are independent; independent rows admit no vanishing
positive combination and hence no antiparallel subset sums.  Controllable
states are executable whenever the task count does not exceed the input
dimension; with more tasks than inputs a zero convex combination of rows
can exist without any exactly antiparallel subset-sum pair, so the last
implication can fail.  The grid sweep and the randomized test generators
keep to the regime where the chain is sound.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import qp
from .dynamics import BoxRegion, SystemModel
from .pixmap import write_angle_pixmap
from .value_functions import LieBundle, TaskSpec, lie_derivatives


class TooManyTasksError(ValueError):
    """Subset enumeration supports at most 16 tasks."""


class NotACommonGoalError(ValueError):
    pass


@dataclass
class AnalysisTolerances:
    value_tol: float = 1e-6      # task counts as finished at or below this
    grad_tol: float = 1e-9       # row treated as zero below this norm
    angle_tol: float = 1e-9      # antiparallel when cos < -1 + angle_tol
    margin: float = 1e-9         # strictness margin for executability
    input_bound: float = 1e3     # box radius for the executability LP
    eq_tol: float = 1e-9         # |f(x)| threshold for equilibrium states


@dataclass
class ExecutabilityReport:
    independent: bool
    orthogonal: bool
    concurrently_controllable: bool
    concurrently_executable: bool
    witness_input: Optional[np.ndarray] = None
    infeasibility_certificate: Optional[np.ndarray] = None
    violating_subsets: Optional[tuple] = None
    premise_violations: list = field(default_factory=list)


@dataclass
class GoalSetReport:
    grid_cells: list
    empty: bool


@dataclass
class SublevelMonitor:
    task_index: int
    level: float
    breached: bool
    breach_time: Optional[float] = None


def check_independence(bundle: LieBundle, grad_tol: float = 1e-9) -> bool:
    """Nonzero gradient rows have numerical rank equal to their count."""
    norms = np.linalg.norm(bundle.lg, axis=1)
    rows = bundle.lg[norms > grad_tol]
    if rows.shape[0] == 0:
        return True
    s = np.linalg.svd(rows, compute_uv=False)
    rank = int(np.sum(s > grad_tol * s[0])) if s[0] > 0 else 0
    return rank == rows.shape[0]


def check_orthogonality(bundle: LieBundle, tol: float = 1e-9) -> bool:
    """All distinct row pairs have relative inner product at most tol."""
    lg = bundle.lg
    norms = np.linalg.norm(lg, axis=1)
    gram = np.abs(lg @ lg.T)
    bound = tol * np.outer(norms, norms)
    off = ~np.eye(lg.shape[0], dtype=bool)
    return bool(np.all(gram[off] <= bound[off] + 1e-300))


def _active_rows(bundle: LieBundle, value_tol: float):
    return [i for i in range(bundle.n_tasks) if bundle.values[i] > value_tol]


def check_concurrent_executability(bundle: LieBundle,
                                   input_bound: float = 1e3,
                                   margin: float = 1e-9,
                                   value_tol: float = 1e-6):
    """Decide whether one input strictly decreases all unfinished tasks.

    Returns ``(True, witness_input)`` or ``(False, certificate_weights)``
    with the weights indexed like the tasks (zeros on finished tasks).
    """
    if input_bound <= 0 or margin <= 0:
        raise ValueError("input_bound and margin must be positive")
    act = _active_rows(bundle, value_tol)
    m = bundle.input_dim
    if not act:
        return True, np.zeros(m)

    d = m + 1
    rows, rhs = [], []
    for i in act:
        r = np.zeros(d)
        r[:m] = bundle.lg[i]
        r[m] = -1.0
        rows.append(r)
        rhs.append(-bundle.lf[i])
    for j in range(m):
        for sgn in (1.0, -1.0):
            r = np.zeros(d)
            r[j] = sgn
            rows.append(r)
            rhs.append(input_bound)
    c = np.zeros(d)
    c[m] = 1.0
    z0 = np.zeros(d)
    z0[m] = float(np.max(bundle.lf[act])) + 1.0
    res = qp.solve_lp(c, np.vstack(rows), np.array(rhs), z0)

    if res.value < -margin:
        return True, res.z[:m].copy()
    lam = np.zeros(bundle.n_tasks)
    lam[act] = res.multipliers[:len(act)]
    total = lam.sum()
    if total > 0:
        lam = lam / total
    return False, lam


def _subset_sums(lg: np.ndarray):
    """Sums of rows over every nonempty subset, masks as bit patterns."""
    n, m = lg.shape
    masks = np.arange(1, 2 ** n)
    bits = (masks[:, None] >> np.arange(n)[None, :]) & 1
    return masks, bits.astype(float) @ lg


def _mask_to_subset(mask: int) -> tuple:
    return tuple(i for i in range(16) if mask >> i & 1)


def check_concurrent_controllability(bundle: LieBundle,
                                     angle_tol: float = 1e-9,
                                     grad_tol: float = 1e-9):
    """No pair of nonzero subset sums of gradient rows may be antiparallel.

    Enumerates all ordered pairs of nonempty subsets, overlapping pairs
    included (a subset paired with itself cannot violate, since equality
    with a negative multiple of itself forces a zero sum).  Returns
    ``(True, None)`` or ``(False, (P, Q))`` with the violating index sets.
    """
    n = bundle.n_tasks
    if n > 16:
        raise TooManyTasksError(f"subset enumeration unsupported for {n} > 16 tasks")
    masks, sums = _subset_sums(bundle.lg)
    norms = np.linalg.norm(sums, axis=1)
    keep = norms > grad_tol
    if not np.any(keep):
        return True, None
    dirs = sums[keep] / norms[keep, None]
    kept_masks = masks[keep]

    k = dirs.shape[0]
    if k <= 4096:
        cos = dirs @ dirs.T
        hit = np.argwhere(cos < -1.0 + angle_tol)
        if hit.size:
            a, b = hit[0]
            return False, (_mask_to_subset(int(kept_masks[a])),
                           _mask_to_subset(int(kept_masks[b])))
        return True, None

    # large task counts: search each direction's antipode neighborhood
    from scipy.spatial import cKDTree
    tree = cKDTree(dirs)
    # cos < -1 + tol  <=>  |d_a + d_b| < sqrt(2 tol)
    radius = math.sqrt(2.0 * angle_tol)
    pairs = tree.query_ball_point(-dirs, r=radius)
    for a, lst in enumerate(pairs):
        for b in lst:
            if float(dirs[a] @ dirs[b]) < -1.0 + angle_tol:
                return False, (_mask_to_subset(int(kept_masks[a])),
                               _mask_to_subset(int(kept_masks[b])))
    return True, None


def premise_violations(bundle: LieBundle, value_tol: float = 1e-6,
                       grad_tol: float = 1e-9) -> list:
    """Tasks whose value is positive while their gradient row vanishes."""
    norms = np.linalg.norm(bundle.lg, axis=1)
    return [i for i in range(bundle.n_tasks)
            if bundle.values[i] > value_tol and norms[i] < grad_tol]


def analyze_state(tasks: Sequence[TaskSpec], model: SystemModel, x,
                  tol: Optional[AnalysisTolerances] = None) -> ExecutabilityReport:
    """Run all four checks on one state's Lie derivative bundle."""
    tol = tol or AnalysisTolerances()
    bundle = lie_derivatives(tasks, model, x)
    independent = check_independence(bundle, tol.grad_tol)
    orthogonal = check_orthogonality(bundle, tol.angle_tol)
    controllable, viol = check_concurrent_controllability(
        bundle, tol.angle_tol, tol.grad_tol)
    executable, payload = check_concurrent_executability(
        bundle, tol.input_bound, tol.margin, tol.value_tol)
    return ExecutabilityReport(
        independent=independent,
        orthogonal=orthogonal,
        concurrently_controllable=controllable,
        concurrently_executable=executable,
        witness_input=payload if executable else None,
        infeasibility_certificate=None if executable else payload,
        violating_subsets=viol,
        premise_violations=premise_violations(bundle, tol.value_tol, tol.grad_tol),
    )


@dataclass
class GridAnalysis:
    """Vectorized per-cell check results over a rectangular region.

    Boolean fields are indexed [ix, iy] following ``xs`` and ``ys``;
    ``angles`` maps task index pairs to gradient-row angle fields in
    radians (zero where either row vanishes).
    """

    xs: np.ndarray
    ys: np.ndarray
    independent: np.ndarray
    orthogonal: np.ndarray
    controllable: np.ndarray
    executable: np.ndarray
    premise_violation: np.ndarray
    angles: dict

    def to_csv(self, path) -> None:
        pair_keys = sorted(self.angles)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "independent", "orthogonal",
                        "controllable", "executable"]
                       + [f"angle_{i}_{j}" for i, j in pair_keys])
            for ix, xv in enumerate(self.xs):
                for iy, yv in enumerate(self.ys):
                    w.writerow([f"{xv:.10g}", f"{yv:.10g}",
                                int(self.independent[ix, iy]),
                                int(self.orthogonal[ix, iy]),
                                int(self.controllable[ix, iy]),
                                int(self.executable[ix, iy])]
                               + [f"{self.angles[k][ix, iy]:.8f}" for k in pair_keys])

    def write_angle_pixmaps(self, out_dir) -> list:
        out_dir = Path(out_dir)
        paths = []
        if not self.angles:
            placeholder = np.zeros((self.xs.size, self.ys.size))
            p = out_dir / "angles_placeholder.ppm"
            write_angle_pixmap(p, placeholder)
            return [p]
        for (i, j), fld in sorted(self.angles.items()):
            p = out_dir / f"angles_{i}_{j}.ppm"
            write_angle_pixmap(p, fld)
            paths.append(p)
        return paths


def _worker_count() -> int:
    env = os.environ.get("MTCLF_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _grid_chunk(tasks, model, pts, tol: AnalysisTolerances):
    """All checks on a flat (K, 2) array of states, vectorized per task."""
    K = pts.shape[0]
    N = len(tasks)
    m = model.input_dim
    vals = np.stack([t.value_fn.value_many(pts) for t in tasks], axis=1)
    grads = np.stack([t.value_fn.gradient_many(pts) for t in tasks], axis=1)

    F = np.empty((K, model.state_dim))
    Gm = np.empty((K, model.state_dim, m))
    for k in range(K):
        F[k] = model.f(pts[k])
        Gm[k] = model.g(pts[k])
    lf = np.einsum("kni,ki->kn", grads, F)
    lg = np.einsum("kni,kim->knm", grads, Gm)
    norms = np.linalg.norm(lg, axis=2)

    active = vals > tol.value_tol
    nonzero = norms > tol.grad_tol
    premise = np.any(active & ~nonzero, axis=1)

    # independence: zero rows do not change the rank
    masked = np.where(nonzero[:, :, None], lg, 0.0)
    s = np.linalg.svd(masked, compute_uv=False)
    smax = s[:, 0]
    rank = np.sum(s > tol.grad_tol * np.maximum(smax, 1e-300)[:, None], axis=1)
    independent = rank == nonzero.sum(axis=1)

    gram = np.einsum("knm,kpm->knp", lg, lg)
    bound = tol.angle_tol * np.einsum("kn,kp->knp", norms, norms)
    off = ~np.eye(N, dtype=bool)
    orthogonal = np.all(np.abs(gram[:, off]) <= bound[:, off] + 1e-300, axis=1)

    if N <= 6:
        masks = np.arange(1, 2 ** N)
        bits = ((masks[:, None] >> np.arange(N)[None, :]) & 1).astype(float)
        sums = np.einsum("sn,knm->ksm", bits, lg)
        snorm = np.linalg.norm(sums, axis=2)
        sdir = sums / np.maximum(snorm, 1e-300)[:, :, None]
        cos = np.einsum("ksm,ktm->kst", sdir, sdir)
        valid = (snorm > tol.grad_tol)[:, :, None] & (snorm > tol.grad_tol)[:, None, :]
        controllable = ~np.any((cos < -1.0 + tol.angle_tol) & valid, axis=(1, 2))
    else:
        controllable = np.empty(K, dtype=bool)
        for k in range(K):
            bundle = LieBundle(state=pts[k], values=vals[k], lf=lf[k],
                               lg=lg[k], q=np.zeros(N))
            controllable[k], _ = check_concurrent_controllability(
                bundle, tol.angle_tol, tol.grad_tol)

    # executability: certified witness direction first, LP on the rest
    unit = lg / np.maximum(norms, 1e-300)[:, :, None]
    executable = np.zeros(K, dtype=bool)
    none_active = ~np.any(active, axis=1)
    executable[none_active] = True
    for cand in (unit, lg):
        pend = ~executable & ~none_active
        if not np.any(pend):
            break
        dsum = np.where(active[:, :, None], cand, 0.0).sum(axis=1)
        dn = np.linalg.norm(dsum, axis=1)
        u = -tol.input_bound * dsum / np.maximum(dn, 1e-300)[:, None]
        t_hat = np.where(active, lf + np.einsum("knm,km->kn", lg, u), -np.inf)
        executable |= pend & (dn > 1e-300) & (np.max(t_hat, axis=1) < -tol.margin)
    for k in np.nonzero(~executable & ~none_active)[0]:
        bundle = LieBundle(state=pts[k], values=vals[k], lf=lf[k], lg=lg[k],
                           q=np.zeros(N))
        ok, _ = check_concurrent_executability(
            bundle, tol.input_bound, tol.margin, tol.value_tol)
        executable[k] = ok

    angles = {}
    for i in range(N):
        for j in range(i + 1, N):
            denom = norms[:, i] * norms[:, j]
            cosij = np.where(denom > 1e-300, gram[:, i, j] / np.maximum(denom, 1e-300), 1.0)
            angles[(i, j)] = np.arccos(np.clip(cosij, -1.0, 1.0))
    return independent, orthogonal, controllable, executable, premise, angles


def grid_analysis(tasks: Sequence[TaskSpec], model: SystemModel,
                  box: BoxRegion, resolution,
                  tol: Optional[AnalysisTolerances] = None,
                  workers: Optional[int] = None) -> GridAnalysis:
    """Evaluate all checks on a regular grid over a planar box.

    ``resolution`` is the node count per axis (scalar or pair, >= 2).
    Cells are processed in row chunks, in parallel when ``workers`` (or
    the MTCLF_THREADS environment variable) asks for it, and merged by
    cell index.
    """
    tol = tol or AnalysisTolerances()
    if box.dim != 2:
        raise ValueError("grid analysis is built for planar regions")
    if len(tasks) > 12:
        raise TooManyTasksError("grid sweeps support at most 12 tasks")
    xs, ys = box.axis_points(resolution)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    K = pts.shape[0]
    shape = (xs.size, ys.size)
    N = len(tasks)

    workers = workers if workers is not None else _worker_count()
    chunks = np.array_split(np.arange(K), max(1, min(workers * 4, K)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda idx: _grid_chunk(tasks, model, pts[idx], tol), chunks))
    else:
        parts = [_grid_chunk(tasks, model, pts[idx], tol) for idx in chunks]

    def gather(field_idx):
        return np.concatenate([p[field_idx] for p in parts]).reshape(shape)

    angles = {}
    for i in range(N):
        for j in range(i + 1, N):
            angles[(i, j)] = np.concatenate(
                [p[5][(i, j)] for p in parts]).reshape(shape)
    return GridAnalysis(xs=xs, ys=ys,
                        independent=gather(0), orthogonal=gather(1),
                        controllable=gather(2), executable=gather(3),
                        premise_violation=gather(4), angles=angles)


def common_goal_scan(tasks: Sequence[TaskSpec], model: SystemModel,
                     box: BoxRegion, resolution,
                     value_tol: float = 0.01,
                     eq_tol: float = 1e-9) -> GoalSetReport:
    """Grid cells where every task value is small and the drift vanishes.

    For drift-free systems these are exactly the shared equilibrium goal
    candidates; an empty report signals that the tasks cannot all finish
    anywhere in the box.
    """
    axes = box.axis_points(resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.stack([t.value_fn.value_many(pts) for t in tasks], axis=1)
    ok = np.all(vals <= value_tol, axis=1)
    cells = []
    for k in np.nonzero(ok)[0]:
        if np.linalg.norm(model.f(pts[k])) <= eq_tol:
            cells.append(pts[k])
    return GoalSetReport(grid_cells=cells, empty=len(cells) == 0)


def near_goal_controllable_radius(tasks: Sequence[TaskSpec], model: SystemModel,
                                  goal, max_radius: float = 1.0,
                                  steps: int = 20,
                                  tol: Optional[AnalysisTolerances] = None,
                                  rings: int = 4, directions: int = 64) -> float:
    """Largest verified radius of a ball around a shared goal on which the
    tasks stay concurrently controllable.

    Verification samples ``rings`` circles (random unit directions beyond
    the plane) at each candidate radius, goal excluded, and bisects over
    the radius ``steps`` times.  Raises ``NotACommonGoalError`` unless all
    task values vanish at the goal and the goal is an equilibrium.
    """
    tol = tol or AnalysisTolerances()
    goal = np.asarray(goal, dtype=float)
    worst = max(t.value(goal) for t in tasks)
    if worst > tol.value_tol or np.linalg.norm(model.f(goal)) > tol.eq_tol:
        raise NotACommonGoalError(
            f"{goal} is not a common equilibrium goal (max value {worst:.3g})")

    n = goal.shape[0]
    if n == 2:
        ang = np.linspace(0.0, 2.0 * np.pi, directions, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(4 * directions, n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    def ball_ok(r: float) -> bool:
        for frac in np.linspace(1.0 / rings, 1.0, rings):
            for d in dirs:
                bundle = lie_derivatives(tasks, model, goal + frac * r * d)
                ok, _ = check_concurrent_controllability(
                    bundle, tol.angle_tol, tol.grad_tol)
                if not ok:
                    return False
        return True

    if ball_ok(max_radius):
        return max_radius
    lo, hi = 0.0, max_radius
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if ball_ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
