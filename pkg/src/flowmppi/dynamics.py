"""Discrete-time dynamics, rollouts, collision checks, and the trajectory cost.

Two systems: a planar double integrator (4 states, 2 controls, dt=0.05) and an
underactuated 12DoF quadrotor (12 states, 4 controls, dt=0.025). Dynamics are
deterministic explicit-Euler recurrences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envgen import PLANAR_RADIUS, QUADROTOR_RADIUS
from .grids import SdfGrid

PLANAR_DT = 0.05
PLANAR_DAMPING = 0.95
QUAD_DT = 0.025
QUAD_MASS = 1.0
QUAD_IX = 0.5
QUAD_IY = 0.1
QUAD_IZ = 0.3
QUAD_K = 5.0
GRAVITY = -9.81
# The Euler-angle chart requires |pitch| < pi/2; at or beyond it the tangent
# blows up and the state is meaningless.
PITCH_LIMIT = np.pi / 2 - 1e-9

HORIZON = 40


@dataclass(frozen=True)
class SystemSpec:
    name: str
    state_dim: int
    control_dim: int
    position_dim: int
    dt: float
    radius: float


SYSTEMS = {
    "planar": SystemSpec("planar", 4, 2, 2, PLANAR_DT, PLANAR_RADIUS),
    "quadrotor": SystemSpec("quadrotor", 12, 4, 3, QUAD_DT, QUADROTOR_RADIUS),
}


def system_spec(system: str) -> SystemSpec:
    try:
        return SYSTEMS[system]
    except KeyError:
        raise ValueError(f"unknown system {system!r}") from None


@dataclass(frozen=True)
class CostParams:
    terminal_weight: float = 100.0
    running_weight: float = 10.0
    collision_weight: float = 10000.0
    control_sigma: float = 1.0
    goal_radius: float = 0.1

    def __post_init__(self):
        for name in ("terminal_weight", "running_weight", "collision_weight",
                     "control_sigma", "goal_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def default_cost_params(system: str) -> CostParams:
    if system == "planar":
        return CostParams(control_sigma=1.0, goal_radius=0.1)
    if system == "quadrotor":
        return CostParams(control_sigma=4.0, goal_radius=0.3)
    raise ValueError(f"unknown system {system!r}")


class GimbalLockError(RuntimeError):
    """Quadrotor pitch reached the tangent singularity."""


def _wrap_angle(a):
    # Map to (-pi, pi].
    w = np.remainder(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def step_planar(x: np.ndarray, u: np.ndarray, dt: float = PLANAR_DT) -> np.ndarray:
    """One step of the damped double integrator. Works on batches (..., 4)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] + dt * x[..., 2]
    out[..., 1] = x[..., 1] + dt * x[..., 3]
    out[..., 2] = PLANAR_DAMPING * x[..., 2] + dt * u[..., 0]
    out[..., 3] = PLANAR_DAMPING * x[..., 3] + dt * u[..., 1]
    return out


def quadrotor_derivative(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vector field of the 12DoF quadrotor; batched over leading axes."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    p, q, r = x[..., 3], x[..., 4], x[..., 5]
    pd, qd, rd = x[..., 9], x[..., 10], x[..., 11]
    cp, sp = np.cos(p), np.sin(p)
    cq, sq = np.cos(q), np.sin(q)
    cr, sr = np.cos(r), np.sin(r)
    if np.any(np.abs(q) >= PITCH_LIMIT):
        raise GimbalLockError("pitch at or beyond +/- pi/2")
    tq = sq / cq
    thrust = QUAD_K * u[..., 0] / QUAD_MASS

    d = np.empty_like(x)
    d[..., 0] = x[..., 6]
    d[..., 1] = x[..., 7]
    d[..., 2] = x[..., 8]
    d[..., 3] = pd + qd * sp * tq + rd * cp * tq
    d[..., 4] = qd * cp - rd * sp
    d[..., 5] = qd * sp / cq + rd * cp / cq
    d[..., 6] = -(sp * sr + cr * cp * sq) * thrust
    d[..., 7] = -(cr * sp - cp * sr * sq) * thrust
    d[..., 8] = GRAVITY + cp * cq * thrust
    d[..., 9] = ((QUAD_IY - QUAD_IZ) * qd * rd + QUAD_K * u[..., 1]) / QUAD_IX
    d[..., 10] = ((QUAD_IZ - QUAD_IX) * pd * rd + QUAD_K * u[..., 2]) / QUAD_IY
    d[..., 11] = ((QUAD_IX - QUAD_IY) * pd * qd + QUAD_K * u[..., 3]) / QUAD_IZ
    return d


def step_quadrotor(x: np.ndarray, u: np.ndarray, dt: float = QUAD_DT) -> np.ndarray:
    """Explicit-Euler quadrotor step with angles wrapped to (-pi, pi]."""
    out = np.asarray(x, dtype=np.float64) + dt * quadrotor_derivative(x, u)
    out[..., 3:6] = _wrap_angle(out[..., 3:6])
    return out


def step(system: str, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if system == "planar":
        return step_planar(x, u)
    if system == "quadrotor":
        return step_quadrotor(x, u)
    raise ValueError(f"unknown system {system!r}")


def rollout(system: str, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """States (T+1, dx) from x0 under controls (T, du)."""
    states, valid = rollout_batch(system, np.asarray(x0)[None], np.asarray(controls)[None])
    if not valid[0]:
        raise GimbalLockError("rollout hit the pitch singularity")
    return states[0]


def rollout_batch(
    system: str, x0: np.ndarray, controls: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batched rollout.

    x0: (N, dx) or (dx,) broadcast over N; controls: (N, T, du).
    Returns (states (N, T+1, dx), valid (N,) bool). Invalid trajectories
    (pitch singularity, non-finite states) are frozen at the failing state.
    """
    spec = system_spec(system)
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim != 3 or controls.shape[2] != spec.control_dim:
        raise ValueError(f"controls must be (N, T, {spec.control_dim}), got {controls.shape}")
    n, horizon = controls.shape[0], controls.shape[1]
    x0 = np.asarray(x0, dtype=np.float64)
    x0 = np.broadcast_to(x0, (n, spec.state_dim)).copy()

    states = np.empty((n, horizon + 1, spec.state_dim), dtype=np.float64)
    states[:, 0] = x0
    valid = np.ones(n, dtype=bool)
    x = x0
    for t in range(horizon):
        if system == "planar":
            nxt = step_planar(x, controls[:, t])
        else:
            nxt = np.asarray(x) + QUAD_DT * _quad_derivative_guarded(x, controls[:, t], valid)
            nxt[:, 3:6] = _wrap_angle(nxt[:, 3:6])
        bad = ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            valid &= ~bad
            nxt[bad] = x[bad]
        nxt[~valid] = x[~valid]
        states[:, t + 1] = nxt
        x = nxt
    return states, valid


def _quad_derivative_guarded(x, u, valid):
    """Quadrotor vector field that flags gimbal-locked rows instead of raising."""
    locked = np.abs(x[:, 4]) >= PITCH_LIMIT
    if locked.any():
        valid &= ~locked
        x = x.copy()
        x[locked, 4] = 0.0  # placeholder; the row is frozen by the caller
    return quadrotor_derivative(x, u)


def collision_mask(sdf: SdfGrid, positions: np.ndarray, system: str) -> np.ndarray:
    """True where a position is in collision; out-of-bounds counts as collision."""
    spec = system_spec(system)
    positions = np.asarray(positions, dtype=np.float64)
    inb = sdf.in_bounds(positions)
    dist = np.where(inb, sdf.query(np.clip(positions, 0.0, sdf.extent)), -np.inf)
    return dist <= spec.radius


def in_collision(sdf: SdfGrid, x: np.ndarray, system: str) -> bool:
    spec = system_spec(system)
    pos = np.asarray(x, dtype=np.float64)[..., : spec.position_dim]
    return bool(collision_mask(sdf, pos, system))


def goal_distance(states: np.ndarray, x_goal: np.ndarray, system: str) -> np.ndarray:
    """d_G per state, batched over leading axes."""
    states = np.asarray(states, dtype=np.float64)
    x_goal = np.asarray(x_goal, dtype=np.float64)
    if system == "planar":
        return np.linalg.norm(states - x_goal, axis=-1)
    if system == "quadrotor":
        pos_err = np.linalg.norm(states[..., :3] - x_goal[:3], axis=-1)
        rate = np.linalg.norm(states[..., 9:12], axis=-1)
        return pos_err + 0.01 * rate
    raise ValueError(f"unknown system {system!r}")


def goal_reached(x: np.ndarray, x_goal: np.ndarray, system: str, params: CostParams) -> bool:
    return float(goal_distance(x, x_goal, system)) < params.goal_radius


def trajectory_cost_batch(
    states: np.ndarray,
    controls: np.ndarray,
    sdf: SdfGrid,
    x_goal: np.ndarray,
    system: str,
    params: CostParams,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """J over a batch: states (N, T+1, dx), controls (N, T, du) -> (N,).

    J = w_term * d_G(x_T) + sum_{t=1..T-1} w_run * d_G(x_t)
        + sum_{t=1..T} w_coll * D(x_t) + ||U||^2 / (2 sigma^2).
    Invalid rollouts get +inf.
    """
    spec = system_spec(system)
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    d_goal = goal_distance(states, x_goal, system)
    pos = states[..., : spec.position_dim]
    colliding = collision_mask(sdf, pos, system)

    cost = params.terminal_weight * d_goal[:, -1]
    if d_goal.shape[1] > 2:
        cost = cost + params.running_weight * d_goal[:, 1:-1].sum(axis=1)
    cost = cost + params.collision_weight * colliding[:, 1:].sum(axis=1)
    cost = cost + (controls**2).sum(axis=(1, 2)) / (2.0 * params.control_sigma**2)
    if valid is not None:
        cost = np.where(valid, cost, np.inf)
    return cost


def trajectory_cost(
    states: np.ndarray,
    controls: np.ndarray,
    sdf: SdfGrid,
    x_goal: np.ndarray,
    system: str,
    params: CostParams,
) -> float:
    return float(
        trajectory_cost_batch(states[None], controls[None], sdf, x_goal, system, params)[0]
    )


def running_cost(
    x: np.ndarray, u: np.ndarray, sdf: SdfGrid, x_goal: np.ndarray,
    system: str, params: CostParams,
) -> float:
    """Per-step cost of an executed state, used to accumulate trial cost."""
    spec = system_spec(system)
    d = float(goal_distance(x, x_goal, system))
    coll = in_collision(sdf, np.asarray(x)[: spec.position_dim], system)
    ctrl = float(np.sum(np.square(u))) / (2.0 * params.control_sigma**2)
    return params.running_weight * d + params.collision_weight * float(coll) + ctrl
