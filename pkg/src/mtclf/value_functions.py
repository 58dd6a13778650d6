"""Nonnegative cost-to-go backends with exact gradients and task metadata.

A task couples a value backend J(x) >= 0 with its running state cost
q(x) >= 0, a discount rate, and the goal states where the cost vanishes.
Four backends are provided:

* ``AnalyticGoal`` -- closed form (4 sqrt(k)/3) * ||x - goal||^1.5, the
  exact undiscounted cost-to-go for the drift-free identity-input model
  under q(x) = k * ||x - goal|| and a quadratic input penalty.
* ``MinGoal``   -- pointwise minimum of AnalyticGoal branches.
* ``Tabulated`` -- bilinear interpolation on a rectangular 2-d grid,
  gradients differentiate the interpolant.
* ``NeuralMlp`` -- small dense network (tanh hidden layers, softplus
  output), gradients by reverse-mode accumulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import ShapeError, SystemModel


class DomainError(ValueError):
    """Query outside the domain a backend is defined on."""


class ValueBackend:
    """Interface: value(x) >= 0 and gradient(x) of matching length."""

    dim: int

    def value(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    # Batched forms over an (K, dim) array; subclasses override where a
    # vectorized path matters (grid sweeps evaluate tens of thousands).
    def value_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.array([self.value(x) for x in X])

    def gradient_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.array([self.gradient(x) for x in X])

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ShapeError(f"expected state of shape ({self.dim},), got {x.shape}")
        return x


def _goal_value_coeff(cost_scale: float) -> float:
    return 4.0 * np.sqrt(cost_scale) / 3.0


class AnalyticGoal(ValueBackend):
    """Closed-form cost-to-go for reaching a single point.

    value(x) = (4 sqrt(k)/3) r^1.5 and gradient(x) = 2 sqrt(k r) * (x-goal)/r
    with r = ||x - goal||; the gradient extends continuously to zero at the
    goal.  The squared gradient norm equals 4 k r, so one quarter of it
    cancels the running cost k r exactly.
    """

    def __init__(self, goal, cost_scale: float):
        self.goal = np.asarray(goal, dtype=float)
        if self.goal.ndim != 1:
            raise ShapeError("goal must be a vector")
        if cost_scale <= 0:
            raise ValueError("cost_scale must be positive")
        self.cost_scale = float(cost_scale)
        self.dim = self.goal.shape[0]
        self._coeff = _goal_value_coeff(self.cost_scale)

    def value(self, x) -> float:
        x = self._check(x)
        r = float(np.linalg.norm(x - self.goal))
        return self._coeff * r ** 1.5

    def gradient(self, x) -> np.ndarray:
        x = self._check(x)
        d = x - self.goal
        r = float(np.linalg.norm(d))
        if r == 0.0:
            return np.zeros(self.dim)
        return 2.0 * np.sqrt(self.cost_scale * r) * d / r

    def value_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        r = np.linalg.norm(X - self.goal, axis=-1)
        return self._coeff * r ** 1.5

    def gradient_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        d = X - self.goal
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        safe = np.where(r > 0, r, 1.0)
        return 2.0 * np.sqrt(self.cost_scale * r) * d / safe


class MinGoal(ValueBackend):
    """Pointwise minimum of AnalyticGoal branches over several goals.

    Nonsmooth on the locus equidistant from two nearest goals; there the
    gradient follows the branch with the lowest goal index, and
    ``near_tie`` lets callers flag analysis done in that neighborhood.
    """

    def __init__(self, goals, cost_scale: float):
        self.goals = np.asarray(goals, dtype=float)
        if self.goals.ndim != 2 or self.goals.shape[0] < 1:
            raise ShapeError("goals must be a nonempty (k, n) array")
        self.cost_scale = float(cost_scale)
        self.dim = self.goals.shape[1]
        self._branches = [AnalyticGoal(gp, cost_scale) for gp in self.goals]

    def nearest_index(self, x) -> int:
        x = self._check(x)
        d = np.linalg.norm(self.goals - x, axis=1)
        return int(np.argmin(d))  # argmin takes the lowest index on ties

    def near_tie(self, x, tol: float = 1e-9) -> bool:
        x = self._check(x)
        d = np.sort(np.linalg.norm(self.goals - x, axis=1))
        return len(d) > 1 and bool(d[1] - d[0] <= tol)

    def value(self, x) -> float:
        return self._branches[self.nearest_index(x)].value(x)

    def gradient(self, x) -> np.ndarray:
        return self._branches[self.nearest_index(x)].gradient(x)

    def value_many(self, X) -> np.ndarray:
        vals = np.stack([b.value_many(X) for b in self._branches])
        return vals.min(axis=0)

    def gradient_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        d = np.linalg.norm(X[:, None, :] - self.goals[None, :, :], axis=-1)
        idx = np.argmin(d, axis=1)
        out = np.empty_like(X)
        for k, b in enumerate(self._branches):
            sel = idx == k
            if np.any(sel):
                out[sel] = b.gradient_many(X[sel])
        return out


class Tabulated(ValueBackend):
    """Bilinear interpolation of nonnegative node values on a 2-d grid.

    Gradients differentiate the interpolant analytically, so inside any
    grid cell they agree with finite differences of the interpolant to
    rounding.  Queries outside the knot range raise ``DomainError``.
    """

    #: slack for queries that sit on the boundary up to rounding
    edge_tol = 1e-9

    def __init__(self, x_knots, y_knots, values):
        self.x_knots = np.asarray(x_knots, dtype=float)
        self.y_knots = np.asarray(y_knots, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.x_knots.ndim != 1 or self.y_knots.ndim != 1:
            raise ShapeError("knots must be 1-d arrays")
        if np.any(np.diff(self.x_knots) <= 0) or np.any(np.diff(self.y_knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if self.values.shape != (self.x_knots.size, self.y_knots.size):
            raise ShapeError("values must have shape (len(x_knots), len(y_knots))")
        if np.any(self.values < 0):
            raise ValueError("node values must be nonnegative")
        self.dim = 2

    def _locate(self, x):
        x = self._check(x)
        xk, yk = self.x_knots, self.y_knots
        if (x[0] < xk[0] - self.edge_tol or x[0] > xk[-1] + self.edge_tol
                or x[1] < yk[0] - self.edge_tol or x[1] > yk[-1] + self.edge_tol):
            raise DomainError(f"state {x} outside tabulated domain")
        ci = int(np.clip(np.searchsorted(xk, x[0], side="right") - 1, 0, xk.size - 2))
        cj = int(np.clip(np.searchsorted(yk, x[1], side="right") - 1, 0, yk.size - 2))
        hx = xk[ci + 1] - xk[ci]
        hy = yk[cj + 1] - yk[cj]
        tx = np.clip((x[0] - xk[ci]) / hx, 0.0, 1.0)
        ty = np.clip((x[1] - yk[cj]) / hy, 0.0, 1.0)
        return ci, cj, tx, ty, hx, hy

    def value(self, x) -> float:
        ci, cj, tx, ty, _, _ = self._locate(x)
        v = self.values
        return float((1 - tx) * ((1 - ty) * v[ci, cj] + ty * v[ci, cj + 1])
                     + tx * ((1 - ty) * v[ci + 1, cj] + ty * v[ci + 1, cj + 1]))

    def gradient(self, x) -> np.ndarray:
        ci, cj, tx, ty, hx, hy = self._locate(x)
        v = self.values
        gx = ((1 - ty) * (v[ci + 1, cj] - v[ci, cj])
              + ty * (v[ci + 1, cj + 1] - v[ci, cj + 1])) / hx
        gy = ((1 - tx) * (v[ci, cj + 1] - v[ci, cj])
              + tx * (v[ci + 1, cj + 1] - v[ci + 1, cj])) / hy
        return np.array([gx, gy])

    def value_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.array([self.value(x) for x in X])

    def gradient_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.array([self.gradient(x) for x in X])

    def cell_interior(self, x, frac: float = 0.05) -> bool:
        """True when x is at least ``frac`` of a cell away from every edge."""
        ci, cj, tx, ty, _, _ = self._locate(x)
        return bool(frac < tx < 1 - frac and frac < ty < 1 - frac)

    # --- grid file format ------------------------------------------------
    #
    # Plain text, one array per line, space separated:
    #   line 1: "vfgrid 1"
    #   line 2: x-axis knots
    #   line 3: y-axis knots
    #   line 4: node values, row major (x index outer, y index inner)
    # Floats are written with repr so a round trip is bit exact.

    def to_file(self, path) -> None:
        lines = ["vfgrid 1",
                 " ".join(repr(v) for v in self.x_knots),
                 " ".join(repr(v) for v in self.y_knots),
                 " ".join(repr(v) for v in self.values.ravel(order="C"))]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "Tabulated":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != "vfgrid 1":
            raise ValueError(f"{path}: not a vfgrid file")
        xk = np.array(lines[1].split(), dtype=float)
        yk = np.array(lines[2].split(), dtype=float)
        vals = np.array(lines[3].split(), dtype=float)
        if vals.size != xk.size * yk.size:
            raise ValueError(f"{path}: value count does not match knot counts")
        return cls(xk, yk, vals.reshape(xk.size, yk.size))


def _softplus(z):
    # overflow-safe log(1 + exp(z))
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class NeuralMlp(ValueBackend):
    """Dense network with tanh hidden layers and a softplus scalar output.

    Weights are row major: layer k maps an input a of length d_k to
    act(W a + b).  The softplus output keeps the value nonnegative.
    """

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray, str]]):
        if not layers:
            raise ValueError("need at least one layer")
        self.layers = []
        for k, (W, b, act) in enumerate(layers):
            W = np.asarray(W, dtype=float)
            b = np.asarray(b, dtype=float)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: weight/bias shapes {W.shape}/{b.shape}")
            last = k == len(layers) - 1
            if last and act != "softplus":
                raise ValueError("output layer activation must be softplus")
            if not last and act != "tanh":
                raise ValueError("hidden layer activation must be tanh")
            self.layers.append((W, b, act))
        for (W0, _, _), (W1, _, _) in zip(self.layers, self.layers[1:]):
            if W1.shape[1] != W0.shape[0]:
                raise ShapeError("layer widths do not chain")
        if self.layers[-1][0].shape[0] != 1:
            raise ShapeError("output layer must produce a scalar")
        self.dim = self.layers[0][0].shape[1]

    def _forward(self, a):
        pre = []
        for W, b, act in self.layers:
            z = W @ a + b
            pre.append(z)
            a = np.tanh(z) if act == "tanh" else _softplus(z)
        return pre, a

    def value(self, x) -> float:
        x = self._check(x)
        _, a = self._forward(x)
        return float(a[0])

    def gradient(self, x) -> np.ndarray:
        x = self._check(x)
        pre, _ = self._forward(x)
        # reverse sweep: d(output)/d(layer input)
        bar = np.ones(1)
        for (W, b, act), z in zip(reversed(self.layers), reversed(pre)):
            if act == "tanh":
                bar = bar * (1.0 - np.tanh(z) ** 2)
            else:
                bar = bar * _sigmoid(z)
            bar = W.T @ bar
        return bar

    def value_many(self, X) -> np.ndarray:
        A = np.asarray(X, dtype=float).T
        for W, b, act in self.layers:
            Z = W @ A + b[:, None]
            A = np.tanh(Z) if act == "tanh" else _softplus(Z)
        return A[0]

    def to_json(self, path) -> None:
        doc = {"format": "mlp", "layers": [
            {"weights": W.tolist(), "bias": b.tolist(), "activation": act}
            for W, b, act in self.layers]}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def from_json(cls, path) -> "NeuralMlp":
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict) or "layers" not in doc:
            raise ValueError(f"{path}: missing 'layers'")
        return cls([(np.asarray(l["weights"], dtype=float),
                     np.asarray(l["bias"], dtype=float),
                     l.get("activation", "tanh")) for l in doc["layers"]])


@dataclass
class TaskSpec:
    """One executable task: value backend, running cost, discount, goals."""

    value_fn: ValueBackend
    state_cost: Callable[[np.ndarray], float]
    discount: float = 0.0
    goal_points: list = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        if self.discount < 0:
            raise ValueError("discount must be nonnegative")
        self.goal_points = [np.asarray(g, dtype=float) for g in self.goal_points]

    def value(self, x) -> float:
        return self.value_fn.value(x)

    def gradient(self, x) -> np.ndarray:
        return self.value_fn.gradient(x)

    def cost(self, x) -> float:
        q = float(self.state_cost(np.asarray(x, dtype=float)))
        if q < 0:
            raise ValueError(f"state cost must be nonnegative, got {q}")
        return q


def distance_cost(goals, scale: float) -> Callable[[np.ndarray], float]:
    """q(x) = scale * distance to the nearest of the given goals."""
    G = np.atleast_2d(np.asarray(goals, dtype=float))

    def q(x):
        return scale * float(np.min(np.linalg.norm(G - x, axis=1)))

    return q


def point_goal_task(goal, cost_scale: float, discount: float = 0.0,
                    label: str = "") -> TaskSpec:
    goal = np.asarray(goal, dtype=float)
    return TaskSpec(value_fn=AnalyticGoal(goal, cost_scale),
                    state_cost=distance_cost([goal], cost_scale),
                    discount=discount, goal_points=[goal], label=label)


def multi_goal_task(goals, cost_scale: float, discount: float = 0.0,
                    label: str = "") -> TaskSpec:
    goals = np.asarray(goals, dtype=float)
    return TaskSpec(value_fn=MinGoal(goals, cost_scale),
                    state_cost=distance_cost(goals, cost_scale),
                    discount=discount, goal_points=list(goals), label=label)


def backend_task(backend: ValueBackend, goals, cost_scale: float,
                 discount: float = 0.0, label: str = "") -> TaskSpec:
    """Task around an arbitrary backend with a nearest-goal distance cost."""
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    return TaskSpec(value_fn=backend,
                    state_cost=distance_cost(goals, cost_scale),
                    discount=discount, goal_points=list(goals), label=label)


def check_goal_values(task: TaskSpec, value_tol: float) -> float:
    """Largest backend value over the declared goal points (0 if none).

    Raises ``ValueError`` when it exceeds ``value_tol``.
    """
    worst = 0.0
    for gp in task.goal_points:
        worst = max(worst, task.value(gp))
    if worst > value_tol:
        raise ValueError(
            f"task {task.label!r}: value {worst:.3g} at a declared goal "
            f"exceeds tolerance {value_tol:.3g}")
    return worst


@dataclass
class LieRow:
    """Directional-derivative data of one task at one state."""

    value: float
    lf: float
    lg: np.ndarray
    q: float


@dataclass
class LieBundle:
    """Per-task values and Lie derivatives of all tasks at one state.

    ``lf[i] = grad_i . f(x)`` and ``lg[i] = grad_i^T g(x)``; ``q[i]`` is the
    running state cost, kept alongside so constraint offsets can be formed
    without revisiting the tasks.
    """

    state: np.ndarray
    values: np.ndarray
    lf: np.ndarray
    lg: np.ndarray
    q: np.ndarray

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    @property
    def input_dim(self) -> int:
        return self.lg.shape[1]

    def row(self, i: int) -> LieRow:
        return LieRow(value=float(self.values[i]), lf=float(self.lf[i]),
                      lg=self.lg[i], q=float(self.q[i]))


def lie_derivatives(tasks: Sequence[TaskSpec], model: SystemModel, x) -> LieBundle:
    """Evaluate values, running costs, and Lie derivatives at one state."""
    x = np.asarray(x, dtype=float)
    f = model.f(x)
    g = model.g(x)
    n = len(tasks)
    values = np.empty(n)
    lf = np.empty(n)
    lg = np.empty((n, model.input_dim))
    q = np.empty(n)
    for i, task in enumerate(tasks):
        grad = task.gradient(x)
        values[i] = task.value(x)
        lf[i] = grad @ f
        lg[i] = grad @ g
        q[i] = task.cost(x)
    return LieBundle(state=x, values=values, lf=lf, lg=lg, q=q)


def hjb_residual(task: TaskSpec, model: SystemModel, x) -> float:
    """Stationarity defect 0.25*|lg|^2 - lf - (q - discount * value).

    Zero exactly when the backend solves the dynamic-programming equation
    at x for a unit input-cost matrix; for tabulated and learned backends
    the magnitude tracks the approximation quality.
    """
    b = lie_derivatives([task], model, x)
    lg = b.lg[0]
    return float(0.25 * (lg @ lg) - b.lf[0] - (b.q[0] - task.discount * b.values[0]))
