"""Slack-prioritized pointwise min-norm controller.

At each state the input solves

    minimize   ||u||^2 + kappa * ||delta||^2
    subject to lf_i + lg_i . u <= -offset_i + delta_i   (one row per task)
               K delta >= 0
               (f(x) + g(x) u) in the tangent cone of an optional box
               optional componentwise bounds on u

where lf_i, lg_i are the Lie derivatives of task i's value function.  The
offset makes the single-task constraint tight exactly at the input
u* = -0.5 g(x)' grad J(x):

    undiscounted: sqrt(lf^2 + q * |lg|^2)
    discounted:   sqrt(max(0, lf^2 + (q - beta * J) * |lg|^2))

For a backend that satisfies its dynamic-programming equation the
discounted radicand collapses to (lf - 0.5 |lg|^2)^2, so the offset equals
|lf - 0.5 |lg|^2| and the minimizer reproduces u* whenever the bracket is
nonpositive.  States where it is positive are counted in the diagnostics,
as are clamped radicands and tasks whose gradient row vanishes while the
value is still positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import qp
from .dynamics import BoxRegion, OutOfRegionError, SystemModel
from .value_functions import LieBundle, LieRow, TaskSpec, lie_derivatives

SIGMA_MODES = ("undiscounted", "discounted", "zero")

#: below this gradient-row norm a task cannot steer and its row is slack-only
DEGENERATE_GRAD_TOL = 1e-12
#: task values above this count as "not yet done" for degeneracy flagging
DEGENERATE_VALUE_TOL = 1e-6


@dataclass
class ControllerConfig:
    slack_weight: float = 1.0
    priority_matrix: Optional[np.ndarray] = None  # None means identity
    sigma_mode: str = "undiscounted"
    active_tasks: Optional[Sequence[int]] = None  # None means all tasks
    box_region: Optional[BoxRegion] = None
    input_bounds: Optional[tuple[np.ndarray, np.ndarray]] = None
    solver_tol: float = 1e-9
    max_iters: int = 200

    def __post_init__(self):
        if self.slack_weight <= 0:
            raise ValueError("slack_weight must be positive")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.priority_matrix is not None:
            self.priority_matrix = np.asarray(self.priority_matrix, dtype=float)


@dataclass
class ControllerDiagnostics:
    """Per-solve observability of assumption violations."""

    clamped_radicands: int = 0
    degenerate_tasks: list = field(default_factory=list)
    positive_bracket_tasks: list = field(default_factory=list)


@dataclass
class QpSolution:
    input: np.ndarray
    slacks: np.ndarray
    objective: float
    active_set: list
    status: str
    multipliers: dict = field(default_factory=dict)
    iterations: int = 0


@dataclass
class QpData:
    """Assembled min-norm program: weights, rows, and bookkeeping."""

    weights: np.ndarray          # diagonal of the quadratic objective
    G: np.ndarray
    h: np.ndarray
    row_ids: list
    input_dim: int
    task_indices: list
    sigmas: np.ndarray
    bundle: LieBundle
    diagnostics: ControllerDiagnostics


def sigma(task: TaskSpec, row: LieRow) -> float:
    """Constraint offset sqrt(lf^2 + q * |lg|^2) for undiscounted values."""
    if row.q < 0:
        raise ValueError("state cost must be nonnegative")
    lg2 = float(row.lg @ row.lg)
    return float(np.sqrt(row.lf * row.lf + row.q * lg2))


def sigma_bar(task: TaskSpec, row: LieRow,
              diagnostics: Optional[ControllerDiagnostics] = None) -> float:
    """Discount-aware offset; reduces bit-for-bit to ``sigma`` at beta=0.

    The radicand lf^2 + (q - beta*J) * |lg|^2 can go negative when the
    value function is inexact; it is clamped at zero and the clamp is
    counted on the diagnostics object if one is supplied.
    """
    lg2 = float(row.lg @ row.lg)
    radicand = row.lf * row.lf + (row.q - task.discount * row.value) * lg2
    if radicand < 0.0:
        if diagnostics is not None:
            diagnostics.clamped_radicands += 1
        radicand = 0.0
    return float(np.sqrt(radicand))


def single_task_optimal_input(task: TaskSpec, model: SystemModel, x) -> np.ndarray:
    """u* = -0.5 g(x)' grad J(x), the minimizer under unit input cost."""
    return -0.5 * model.g(x).T @ task.gradient(x)


def add_box_invariance_rows(model: SystemModel, x, box: BoxRegion,
                            boundary_tol: float = 1e-9):
    """Half-space rows keeping f(x) + g(x) u inside an axis-aligned box.

    At a face within ``boundary_tol`` of coordinate k the closed-loop
    velocity component k is constrained toward the interior; strictly
    interior states contribute no rows.  Raises ``OutOfRegionError`` for
    states beyond the box.
    """
    x = np.asarray(x, dtype=float)
    if not box.contains(x, tol=boundary_tol):
        raise OutOfRegionError(f"state {x} outside box {box.lower}..{box.upper}")
    f = model.f(x)
    g = model.g(x)
    rows, rhs, ids = [], [], []
    for k in range(box.dim):
        if x[k] >= box.upper[k] - boundary_tol:
            rows.append(g[k])
            rhs.append(-f[k])
            ids.append(f"box:{k}:hi")
        if x[k] <= box.lower[k] + boundary_tol:
            rows.append(-g[k])
            rhs.append(f[k])
            ids.append(f"box:{k}:lo")
    if rows:
        return np.vstack(rows), np.array(rhs), ids
    return np.zeros((0, model.input_dim)), np.zeros(0), ids


def build_qp(tasks: Sequence[TaskSpec], model: SystemModel, x,
             config: ControllerConfig,
             bundle: Optional[LieBundle] = None) -> QpData:
    """Assemble the min-norm program at state x.

    Decision vector z = (u, delta) with one slack per active task.  Rows:
    task decrease constraints, slack prioritization -K delta <= 0, then
    optional box tangent-cone and input-bound rows (which act on u only).
    """
    x = np.asarray(x, dtype=float)
    if bundle is None:
        bundle = lie_derivatives(tasks, model, x)
    m = model.input_dim
    diag = ControllerDiagnostics()

    active = list(config.active_tasks) if config.active_tasks is not None \
        else list(range(len(tasks)))
    N = len(active)

    sigmas = np.zeros(N)
    for a, i in enumerate(active):
        row = bundle.row(i)
        if config.sigma_mode == "undiscounted":
            sigmas[a] = sigma(tasks[i], row)
        elif config.sigma_mode == "discounted":
            sigmas[a] = sigma_bar(tasks[i], row, diag)
        lg2 = float(row.lg @ row.lg)
        if np.sqrt(lg2) < DEGENERATE_GRAD_TOL and row.value > DEGENERATE_VALUE_TOL:
            diag.degenerate_tasks.append(i)
        if row.lf > 0.5 * lg2:
            diag.positive_bracket_tasks.append(i)

    dim = m + N
    rows, rhs, ids = [], [], []
    for a, i in enumerate(active):
        r = np.zeros(dim)
        r[:m] = bundle.lg[i]
        r[m + a] = -1.0
        rows.append(r)
        rhs.append(-bundle.lf[i] - sigmas[a])
        ids.append(f"task:{i}")

    K = config.priority_matrix
    if K is None:
        K = np.eye(N)
    if K.shape[1] != N:
        raise ValueError(f"priority matrix needs {N} columns, has {K.shape[1]}")
    for j in range(K.shape[0]):
        r = np.zeros(dim)
        r[m:] = -K[j]
        rows.append(r)
        rhs.append(0.0)
        ids.append(f"prio:{j}")

    if config.box_region is not None:
        Gb, hb, idb = add_box_invariance_rows(model, x, config.box_region)
        for rb, hv, idv in zip(Gb, hb, idb):
            r = np.zeros(dim)
            r[:m] = rb
            rows.append(r)
            rhs.append(hv)
            ids.append(idv)

    if config.input_bounds is not None:
        lo, hi = config.input_bounds
        for j in range(m):
            r = np.zeros(dim)
            r[j] = 1.0
            rows.append(r)
            rhs.append(float(hi[j]))
            ids.append(f"ubound:{j}:hi")
            r = np.zeros(dim)
            r[j] = -1.0
            rows.append(r)
            rhs.append(-float(lo[j]))
            ids.append(f"ubound:{j}:lo")

    weights = np.concatenate([np.ones(m), config.slack_weight * np.ones(N)])
    G = np.vstack(rows) if rows else np.zeros((0, dim))
    return QpData(weights=weights, G=G, h=np.array(rhs), row_ids=ids,
                  input_dim=m, task_indices=active, sigmas=sigmas,
                  bundle=bundle, diagnostics=diag)


def _starting_point(data: QpData, config: ControllerConfig) -> np.ndarray:
    m, N = data.input_dim, len(data.task_indices)
    z0 = np.zeros(m + N)
    for a in range(N):
        # with u = 0 the task row reads -delta_a <= -lf - sigma
        z0[m + a] = max(0.0, -data.h[a]) + 1.0
    if qp.max_violation(data.G, data.h, z0) <= config.solver_tol:
        return z0
    return qp.find_feasible_point(data.G, data.h, z0, tol=config.solver_tol)


def solve_qp(data: QpData, config: ControllerConfig,
             warm_start: Optional[Sequence[str]] = None) -> QpSolution:
    """Solve an assembled min-norm program.

    ``warm_start`` may carry the active row ids of a previous, nearby
    solve; rows still active are used to seed the working set.
    """
    m, N = data.input_dim, len(data.task_indices)
    H = 2.0 * np.diag(data.weights)
    c = np.zeros(m + N)
    try:
        z0 = _starting_point(data, config)
    except qp.InfeasibleError:
        return QpSolution(input=np.zeros(m), slacks=np.zeros(N),
                          objective=float("inf"), active_set=[],
                          status="infeasible")
    seed = None
    if warm_start:
        lookup = {rid: k for k, rid in enumerate(data.row_ids)}
        seed = [lookup[rid] for rid in warm_start if rid in lookup]
    try:
        res = qp.solve_qp(H, c, data.G, data.h, z0, working=seed,
                          tol=config.solver_tol, max_iters=config.max_iters)
    except qp.MaxIterationsError:
        return QpSolution(input=np.zeros(m), slacks=np.zeros(N),
                          objective=float("inf"), active_set=[],
                          status="max_iters")
    u = res.z[:m]
    delta = res.z[m:]
    objective = float(u @ u + config.slack_weight * (delta @ delta))
    mults = {data.row_ids[i]: float(res.multipliers[i]) for i in res.active}
    return QpSolution(input=u, slacks=delta, objective=objective,
                      active_set=[data.row_ids[i] for i in res.active],
                      status="optimal", multipliers=mults,
                      iterations=res.iterations)


@dataclass
class PointwiseResult:
    solution: QpSolution
    diagnostics: ControllerDiagnostics
    bundle: LieBundle


def solve_pointwise(tasks: Sequence[TaskSpec], model: SystemModel, x,
                    config: ControllerConfig,
                    warm_start: Optional[Sequence[str]] = None) -> PointwiseResult:
    data = build_qp(tasks, model, x, config)
    sol = solve_qp(data, config, warm_start=warm_start)
    return PointwiseResult(solution=sol, diagnostics=data.diagnostics,
                           bundle=data.bundle)


def control(tasks: Sequence[TaskSpec], model: SystemModel, x,
            config: ControllerConfig,
            warm_start: Optional[Sequence[str]] = None) -> np.ndarray:
    """The min-norm input at state x (the full solution is discarded)."""
    res = solve_pointwise(tasks, model, x, config, warm_start=warm_start)
    if res.solution.status != "optimal":
        raise qp.QpError(f"controller QP {res.solution.status} at x={x}")
    return res.solution.input
