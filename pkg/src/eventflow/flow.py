"""Rectified-flow primitives: optimal-transport interpolation, velocity
targets, event-controlled step schedules, and the explicit Euler integrator.

The probability path is the straight line x_t = (1-t) x0 + t x1, whose exact
velocity x1 - x0 is constant in t. Sampling integrates a learned velocity
field from t=0 to t=1 over a schedule whose step size is modulated by the
event embedding: step_size = 1/(T + sigmoid(affine(c))).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class FlowPoint:
    """A point on the noise-to-data path at diffusion time t."""

    x_t: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must be in [0,1], got {self.t}")


@dataclass(frozen=True)
class StepSchedule:
    """Integration grid for one segment.

    ``grid`` is strictly increasing and ends at exactly 1; all interior
    increments equal ``step_size``, the final one may be shorter. ``delta`` is
    in [0,1): event-controlled schedules always have delta in (0,1) (sigmoid
    range); delta=0 is reserved for the uniform 1/T grid of the
    fixed-timestep ablation.
    """

    base_steps: int
    delta: float
    step_size: float
    grid: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.grid.shape[0])


def _check_same_length(x0: np.ndarray, x1: np.ndarray) -> None:
    if x0.shape != x1.shape:
        raise ValueError(f"length mismatch: {x0.shape} vs {x1.shape}")


def ot_interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """(1-t) x0 + t x1, the optimal-transport path between noise and data."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _check_same_length(x0, x1)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0,1], got {t}")
    return (1.0 - t) * x0 + t * x1


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """x1 - x0: the constant velocity of the straight path."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _check_same_length(x0, x1)
    return x1 - x0


def make_schedule(base_steps: int, delta: float) -> StepSchedule:
    """Grid {k/(T+delta) : k=1..T} followed by 1, i.e. T+1 steps for delta>0.

    delta=0 yields the uniform T-step grid.
    """
    if base_steps < 1:
        raise ValueError(f"base_steps must be >= 1, got {base_steps}")
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must be in [0,1), got {delta}")
    step_size = 1.0 / (base_steps + delta)
    grid = np.arange(1, base_steps + 1, dtype=np.float64) * step_size
    if grid[-1] < 1.0:
        grid = np.append(grid, 1.0)
    else:
        grid[-1] = 1.0
    return StepSchedule(
        base_steps=base_steps, delta=float(delta), step_size=step_size, grid=grid
    )


def uniform_schedule(base_steps: int) -> StepSchedule:
    """The fixed 1/T grid used when event control is disabled."""
    return make_schedule(base_steps, 0.0)


def delta_value(c: np.ndarray, weight: np.ndarray, bias: float) -> float:
    """sigmoid(affine(c)): the learned step-size modulation for one event."""
    c = np.asarray(c, dtype=np.float64)
    a = float(c @ np.asarray(weight, dtype=np.float64).reshape(-1) + bias)
    if not np.isfinite(a):
        raise NumericalError(f"nonfinite affine output in step-size head: {a}")
    if a >= 0:
        return 1.0 / (1.0 + np.exp(-a))
    e = np.exp(a)
    return e / (1.0 + e)


def event_step_size(
    c: np.ndarray, weight: np.ndarray, bias: float, base_steps: int
) -> StepSchedule:
    """Event-controlled schedule: step_size = 1/(T + sigmoid(affine(c)))."""
    return make_schedule(base_steps, delta_value(c, weight, bias))


def solve_ode(velocity_fn, x_init: np.ndarray, schedule: StepSchedule) -> np.ndarray:
    """Explicit Euler from t=0 over the schedule grid.

    The velocity is evaluated at the left endpoint of each interval, so the
    final grid point 1 is never an evaluation point. ``velocity_fn`` may be
    stateful (the denoiser updates its latent state per call); it only needs
    to map (x, t_prev) to an array of x's shape.
    """
    x = np.array(x_init, dtype=np.float64)
    t_prev = 0.0
    for k, t_k in enumerate(schedule.grid):
        v = np.asarray(velocity_fn(x, t_prev), dtype=np.float64)
        if v.shape != x.shape:
            raise ValueError(f"velocity shape {v.shape} != state shape {x.shape}")
        x = x + v * (t_k - t_prev)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"nonfinite state at integration step {k}")
        t_prev = float(t_k)
    return x
