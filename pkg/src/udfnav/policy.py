"""Reactive motion generation on a distance field.

The obstacle metric is G(x) = I + f_blow(x) u u^T with u the unit field
gradient; velocities are its inverse applied to a capped goal attractor. The
rank-one structure gives the closed form (I + a uu^T)^-1 = I - a/(1+a) uu^T,
so no matrix is ever inverted at runtime. Trajectories come from fixed-step
RK4 integration of that velocity field.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

WORKSPACE_BOUND = 1.5          # integration confined to [-1.5, 1.5]^3 with margin
DEGENERATE_GRADIENT_NORM = 1e-9


class WorkspaceError(ValueError):
    """Start state outside the supported workspace box."""


class NotPositiveDefiniteError(ValueError):
    """QP metric must be symmetric positive definite."""


@dataclass
class PolicyConfig:
    """Motion-policy constants.

    k, beta, eps parameterize the blow-up factor k/(f+eps)^4 exp(-beta f);
    the defaults are the reference values. The base dynamics is the capped
    linear attractor -gain * (x - goal) with speed limited to speed_cap.
    """

    goal: np.ndarray
    k: float = 20.0
    beta: float = 100.0
    eps: float = 1e-8
    gain: float = 1.0
    speed_cap: float = 0.5
    step: float = 0.01
    max_steps: int = 5000
    goal_radius: float = 0.02

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if self.goal.shape != (3,) or not np.all(np.isfinite(self.goal)):
            raise ValueError("goal must be a finite 3-vector")
        for name in ("k", "beta", "eps", "step", "goal_radius", "gain", "speed_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


class TerminalStatus(str, enum.Enum):
    REACHED_GOAL = "reached-goal"
    MAX_STEPS = "max-steps"
    NUMERIC_FAILURE = "numeric-failure"


@dataclass
class Trajectory:
    """Integrated states: times increase by the fixed step; row i holds the
    policy velocity, field value, and blow-up factor evaluated at position i."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    field_values: np.ndarray
    blow_values: np.ndarray
    status: TerminalStatus
    degenerate_events: int = 0

    def __len__(self):
        return len(self.times)

    def summary(self) -> dict:
        return {
            "status": self.status.value,
            "steps": int(len(self.times) - 1),
            "duration": float(self.times[-1]) if len(self.times) else 0.0,
            "degenerate_events": int(self.degenerate_events),
        }


def blow_up(f_value: float, config: PolicyConfig) -> float:
    """Penalty factor k/(f+eps)^4 * exp(-beta f), on f clamped at zero.

    Strictly decreasing in f; finite at f = 0 thanks to eps. Trained fields
    can dip slightly negative near the surface, hence the clamp.
    """
    f = max(float(f_value), 0.0)
    return config.k / (f + config.eps) ** 4 * np.exp(-config.beta * f)


def base_velocity(x: np.ndarray, config: PolicyConfig) -> np.ndarray:
    """Linear attractor toward the goal, speed-limited to speed_cap."""
    v = -config.gain * (x - config.goal)
    speed = np.linalg.norm(v)
    if speed > config.speed_cap:
        v = v * (config.speed_cap / speed)
    return v


@dataclass
class _VelocityEval:
    velocity: np.ndarray
    f_value: float
    f_blow: float
    degenerate: bool


def _velocity(field_model, x: np.ndarray, config: PolicyConfig) -> _VelocityEval:
    ev = field_model.evaluate(x)
    g_base = base_velocity(x, config)
    fb = blow_up(ev.value, config)
    grad_norm = np.linalg.norm(ev.gradient)
    if grad_norm < DEGENERATE_GRADIENT_NORM:
        return _VelocityEval(g_base, ev.value, fb, True)
    u = ev.gradient / grad_norm
    v = g_base - (fb / (1.0 + fb)) * np.dot(u, g_base) * u
    return _VelocityEval(v, ev.value, fb, False)


def modulated_velocity(field_model, x, config: PolicyConfig) -> np.ndarray:
    """Velocity [I - f_blow/(1+f_blow) uu^T] g_base(x); never inverts a matrix.

    When the field gradient is degenerate (norm below 1e-9) the base velocity
    passes through unmodulated; integrate() counts those events.
    """
    x = np.asarray(x, dtype=np.float64)
    return _velocity(field_model, x, config).velocity


def integrate(field_model, x0, config: PolicyConfig) -> Trajectory:
    """Fixed-step classical RK4 on the modulated velocity field.

    Terminates on reaching the goal radius, exhausting max_steps, or a
    non-finite state (recorded as numeric-failure, trajectory truncated at the
    last finite state). field_model is anything with evaluate(x) returning an
    object with value/gradient attributes.
    """
    x = np.asarray(x0, dtype=np.float64)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite 3-vector")
    if np.any(np.abs(x) > WORKSPACE_BOUND):
        raise WorkspaceError(f"start outside [-{WORKSPACE_BOUND}, {WORKSPACE_BOUND}]^3")
    h = config.step
    times = [0.0]
    positions = [x.copy()]
    degenerate = 0

    ev = _velocity(field_model, x, config)
    degenerate += ev.degenerate
    velocities = [ev.velocity]
    f_values = [ev.f_value]
    blow_values = [ev.f_blow]
    status = TerminalStatus.MAX_STEPS

    if np.linalg.norm(x - config.goal) <= config.goal_radius:
        status = TerminalStatus.REACHED_GOAL
    else:
        for step in range(config.max_steps):
            k1 = ev.velocity
            e2 = _velocity(field_model, x + 0.5 * h * k1, config)
            e3 = _velocity(field_model, x + 0.5 * h * e2.velocity, config)
            e4 = _velocity(field_model, x + h * e3.velocity, config)
            degenerate += e2.degenerate + e3.degenerate + e4.degenerate
            x_new = x + (h / 6.0) * (k1 + 2.0 * e2.velocity + 2.0 * e3.velocity
                                     + e4.velocity)
            if not np.all(np.isfinite(x_new)):
                status = TerminalStatus.NUMERIC_FAILURE
                break
            x = x_new
            ev = _velocity(field_model, x, config)
            degenerate += ev.degenerate
            times.append((step + 1) * h)
            positions.append(x.copy())
            velocities.append(ev.velocity)
            f_values.append(ev.f_value)
            blow_values.append(ev.f_blow)
            if np.linalg.norm(x - config.goal) <= config.goal_radius:
                status = TerminalStatus.REACHED_GOAL
                break

    return Trajectory(np.asarray(times), np.asarray(positions),
                      np.asarray(velocities), np.asarray(f_values),
                      np.asarray(blow_values), status, degenerate)


def qp_equivalence_check(metric: np.ndarray, g_base: np.ndarray) -> np.ndarray:
    """Minimizer of 1/2 v^T G v - v^T g_base by direct linear solve.

    Test-support operation: verifies that the modulated dynamics equal the
    local QP solution for the metric G. Raises on non-SPD input.
    """
    metric = np.asarray(metric, dtype=np.float64)
    g_base = np.asarray(g_base, dtype=np.float64)
    if metric.shape != (3, 3) or g_base.shape != (3,):
        raise ValueError("need a 3x3 metric and a 3-vector")
    if not np.allclose(metric, metric.T, atol=1e-10):
        raise NotPositiveDefiniteError("metric is not symmetric")
    try:
        factor = cho_factor(metric)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("metric is not positive definite")
    return cho_solve(factor, g_base)


def write_trajectory_csv(traj: Trajectory, path, scene=None) -> None:
    """CSV rows (t, x, y, z, vx, vy, vz, f_theta, f_blow [, clearance])."""
    cols = [traj.times[:, None], traj.positions, traj.velocities,
            traj.field_values[:, None], traj.blow_values[:, None]]
    header = "t,x,y,z,vx,vy,vz,f_theta,f_blow"
    if scene is not None:
        cols.append(scene.distances(traj.positions)[:, None])
        header += ",oracle_clearance"
    table = np.hstack(cols)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
