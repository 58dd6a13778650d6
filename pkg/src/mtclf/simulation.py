"""Closed-loop integration of the min-norm controller.

Fixed-step fourth-order Runge-Kutta with the input held constant across
each step (zero-order hold), matching how the controller would be
deployed discretely and keeping the program out of the integrator
stages.  A run ends when every task value is small near a shared goal
(converged), when the input stays near zero for a window while values
remain large (stalled), when the state leaves the analysis region, or at
the step budget.

Per-task sublevel monitors record whether a value ever rose above its
starting level, the observable trace of having to leave one task's
sublevel set to serve another.  When every slack stays at zero the sum
of task values must be nonincreasing along the trajectory; the loop
asserts that decrease and raises if integration breaks it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controller import ControllerConfig, solve_pointwise
from .dynamics import BoxRegion, SystemModel
from .executability import SublevelMonitor
from .value_functions import TaskSpec

TERMINATIONS = ("converged", "stalled", "max_steps", "left_region")


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class LyapunovViolationError(SimulationError):
    pass


@dataclass
class SimulationConfig:
    dt: float = 0.01
    max_steps: int = 5000
    goal_state_tol: float = 0.05   # distance to a shared goal at convergence
    goal_value_tol: float = 0.05   # largest task value at convergence
    stall_u_tol: float = 1e-3
    stall_window: int = 50
    check_lyapunov: bool = True
    lyapunov_slack_tol: float = 1e-9
    lyapunov_decrease_tol: float = 1e-8

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")


@dataclass
class Trajectory:
    times: np.ndarray            # (S+1,)
    states: np.ndarray           # (S+1, n)
    inputs: np.ndarray           # (S, m)
    task_values: np.ndarray      # (S+1, N)
    slacks: np.ndarray           # (S, N)
    termination: str
    sublevel_monitors: list = field(default_factory=list)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        """One row per recorded state.

        Header: t, x1..xn, u1..um, J1..JN, delta1..deltaN, term.  The final
        row has no outgoing input; its input and slack columns are zero.
        """
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.size else 0
        N = self.task_values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i+1}" for i in range(n)]
                       + [f"u{i+1}" for i in range(m)]
                       + [f"J{i+1}" for i in range(N)]
                       + [f"delta{i+1}" for i in range(N)] + ["term"])
            S = self.inputs.shape[0]
            for k in range(self.states.shape[0]):
                u = self.inputs[k] if k < S else np.zeros(m)
                d = self.slacks[k] if k < S else np.zeros(N)
                w.writerow([f"{self.times[k]:.10g}"]
                           + [f"{v:.10g}" for v in self.states[k]]
                           + [f"{v:.10g}" for v in u]
                           + [f"{v:.10g}" for v in self.task_values[k]]
                           + [f"{v:.10g}" for v in d]
                           + [self.termination])


def shared_goal_points(tasks: Sequence[TaskSpec], value_tol: float = 1e-6) -> list:
    """Declared goal points at which every task value vanishes."""
    shared = []
    for task in tasks:
        for gp in task.goal_points:
            if all(t.value(gp) <= value_tol for t in tasks):
                if not any(np.allclose(gp, s) for s in shared):
                    shared.append(np.asarray(gp, dtype=float))
    return shared


def _rk4_step(model: SystemModel, x, u, dt):
    def vel(state):
        return model.f(state) + model.g(state) @ u

    k1 = vel(x)
    k2 = vel(x + 0.5 * dt * k1)
    k3 = vel(x + 0.5 * dt * k2)
    k4 = vel(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(tasks: Sequence[TaskSpec], model: SystemModel, x0,
             controller: ControllerConfig, config: SimulationConfig,
             region: Optional[BoxRegion] = None) -> Trajectory:
    """Integrate the closed loop from x0 until a termination fires.

    The controller QP is warm started with the previous step's active
    set.  Controller failures surface as ``SimulationError`` carrying the
    step index.
    """
    x = np.asarray(x0, dtype=float)
    if region is not None and not region.contains(x, tol=1e-12):
        raise ValueError(f"x0 {x} outside the analysis region")

    times = [0.0]
    states = [x.copy()]
    inputs, slacks, values = [], [], []
    values.append(np.array([t.value(x) for t in tasks]))
    goals = shared_goal_points(tasks)
    warm = None
    slacks_all_zero = True
    quiet = 0
    termination = "max_steps"

    for step in range(config.max_steps):
        try:
            res = solve_pointwise(tasks, model, x, controller, warm_start=warm)
        except Exception as exc:  # pragma: no cover - defensive rewrap
            raise SimulationError(f"controller failed: {exc}", step) from exc
        sol = res.solution
        if sol.status != "optimal":
            raise SimulationError(f"controller QP {sol.status}", step)
        warm = sol.active_set
        u = sol.input

        x = _rk4_step(model, x, u, config.dt)
        vals = np.array([t.value(x) for t in tasks])

        times.append(times[-1] + config.dt)
        states.append(x.copy())
        inputs.append(u.copy())
        slacks.append(sol.slacks.copy())
        values.append(vals)

        if sol.slacks.size and np.max(np.abs(sol.slacks)) > config.lyapunov_slack_tol:
            slacks_all_zero = False
        if (config.check_lyapunov and slacks_all_zero
                and vals.sum() > values[-2].sum() + config.lyapunov_decrease_tol):
            raise LyapunovViolationError(
                f"sum of task values rose by {vals.sum() - values[-2].sum():.3g} "
                f"with all slacks at zero", step)

        if region is not None and not region.contains(x, tol=1e-9):
            termination = "left_region"
            break

        near_goal = (not goals) or any(
            np.linalg.norm(x - gp) <= config.goal_state_tol for gp in goals)
        if np.max(vals) <= config.goal_value_tol and near_goal:
            termination = "converged"
            break

        quiet = quiet + 1 if np.linalg.norm(u) <= config.stall_u_tol else 0
        if quiet >= config.stall_window and np.max(vals) > config.goal_value_tol:
            termination = "stalled"
            break

    N = len(tasks)
    m = model.input_dim
    traj = Trajectory(
        times=np.array(times),
        states=np.array(states),
        inputs=np.array(inputs).reshape(len(inputs), m),
        task_values=np.array(values),
        slacks=np.array(slacks).reshape(len(slacks), N),
        termination=termination,
    )
    traj.sublevel_monitors = monitor_sublevels(traj)
    return traj


def monitor_sublevels(traj: Trajectory,
                      levels: Optional[Sequence[float]] = None) -> list:
    """Flag tasks whose value ever exceeded its level (default: at start)."""
    N = traj.task_values.shape[1]
    if levels is None:
        levels = traj.task_values[0]
    monitors = []
    for i in range(N):
        level = float(levels[i])
        above = np.nonzero(traj.task_values[:, i] > level)[0]
        if above.size:
            monitors.append(SublevelMonitor(task_index=i, level=level,
                                            breached=True,
                                            breach_time=float(traj.times[above[0]])))
        else:
            monitors.append(SublevelMonitor(task_index=i, level=level,
                                            breached=False))
    return monitors
