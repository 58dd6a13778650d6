"""Deterministic control-affine system models, xdot = f(x) + g(x) u."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """A state, input, or field evaluation has the wrong dimensions."""


class OutOfRegionError(ValueError):
    """A state lies outside the region an operation is restricted to."""


def _as_state(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ShapeError(f"expected state of shape ({n},), got {x.shape}")
    return x


@dataclass(frozen=True)
class SystemModel:
    """Control-affine dynamics with drift field f and input matrix g.

    ``f_eval`` maps a state of length ``state_dim`` to a velocity of the
    same length; ``g_eval`` maps a state to a ``state_dim x input_dim``
    matrix.  Instances are immutable and safe to share across threads.
    """

    state_dim: int
    input_dim: int
    f_eval: Callable[[np.ndarray], np.ndarray]
    g_eval: Callable[[np.ndarray], np.ndarray]
    label: str = ""

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError("state_dim and input_dim must be positive")

    def f(self, x) -> np.ndarray:
        x = _as_state(x, self.state_dim)
        out = np.asarray(self.f_eval(x), dtype=float)
        if out.shape != (self.state_dim,):
            raise ShapeError(
                f"f({self.label or 'model'}) returned shape {out.shape}, "
                f"expected ({self.state_dim},)")
        return out

    def g(self, x) -> np.ndarray:
        x = _as_state(x, self.state_dim)
        out = np.asarray(self.g_eval(x), dtype=float)
        if out.shape != (self.state_dim, self.input_dim):
            raise ShapeError(
                f"g({self.label or 'model'}) returned shape {out.shape}, "
                f"expected ({self.state_dim}, {self.input_dim})")
        return out


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box, lower[k] < upper[k] componentwise."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ShapeError("box bounds must be 1-d arrays of equal length")
        if not np.all(self.lower < self.upper):
            raise ValueError("box requires lower < upper componentwise")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clamp(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def axis_points(self, nodes_per_axis) -> list[np.ndarray]:
        counts = np.broadcast_to(np.asarray(nodes_per_axis, dtype=int), (self.dim,))
        if np.any(counts < 2):
            raise ValueError("need at least 2 nodes per axis")
        return [np.linspace(self.lower[k], self.upper[k], counts[k])
                for k in range(self.dim)]


def single_integrator(dim: int = 2) -> SystemModel:
    """Drift-free model with identity input matrix, xdot = u."""
    eye = np.eye(dim)
    return SystemModel(
        state_dim=dim,
        input_dim=dim,
        f_eval=lambda x: np.zeros(dim),
        g_eval=lambda x: eye,
        label="single_integrator",
    )


def linear_system(A, B, label: str = "linear") -> SystemModel:
    """Constant-coefficient model, xdot = A x + B u."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError("A must be square")
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise ShapeError("B must have as many rows as A")
    return SystemModel(
        state_dim=A.shape[0],
        input_dim=B.shape[1],
        f_eval=lambda x: A @ x,
        g_eval=lambda x: B,
        label=label,
    )


def has_full_row_rank(model: SystemModel, x, tol: float = 1e-9) -> bool:
    """Whether g(x) has numerically full row rank.

    Uses the relative criterion sigma_min > tol * sigma_max, with
    sigma_max taken as 1 when g(x) is the zero matrix, so the test is
    invariant to the overall scale of g.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    G = model.g(x)
    s = np.linalg.svd(G, compute_uv=False)
    smax = s[0] if s[0] > 0 else 1.0
    smin = s[-1] if G.shape[0] <= G.shape[1] else 0.0
    return bool(smin > tol * smax)
