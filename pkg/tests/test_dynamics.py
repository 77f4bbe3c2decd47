import numpy as np
import pytest

from flowmppi import dynamics
from flowmppi.dynamics import (CostParams, GimbalLockError, default_cost_params,
                               goal_distance, in_collision, rollout,
                               rollout_batch, step_planar, step_quadrotor,
                               trajectory_cost, trajectory_cost_batch)
from flowmppi.grids import OccupancyGrid, occupancy_to_sdf

PLANAR_A = np.array([
    [1.0, 0.0, 0.05, 0.0],
    [0.0, 1.0, 0.0, 0.05],
    [0.0, 0.0, 0.95, 0.0],
    [0.0, 0.0, 0.0, 0.95],
])
PLANAR_B = np.array([
    [0.0, 0.0],
    [0.0, 0.0],
    [0.05, 0.0],
    [0.0, 0.05],
])


def free_sdf(n=64, extent=4.0, ndim=2):
    return occupancy_to_sdf(OccupancyGrid(np.zeros((n,) * ndim, dtype=bool), extent))


def test_planar_step_examples():
    x = step_planar(np.array([0.0, 0.0, 1.0, 0.0]), np.array([0.0, 0.0]))
    assert np.array_equal(x, [0.05, 0.0, 0.95, 0.0])
    x = step_planar(np.zeros(4), np.array([1.0, 0.0]))
    assert np.array_equal(x, [0.0, 0.0, 0.05, 0.0])


def test_planar_step_matches_matrix_recurrence_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = rng.normal(size=4)
        u = rng.normal(size=2)
        expected = PLANAR_A @ x + PLANAR_B @ u
        assert np.array_equal(step_planar(x, u), expected)


def test_planar_damping_decays_velocity():
    x = np.array([0.0, 0.0, 1.0, -2.0])
    for k in range(1, 30):
        x = step_planar(x, np.zeros(2))
        assert np.allclose(x[2:], [0.95**k, -2 * 0.95**k])


def test_quadrotor_hover_is_fixed_point():
    hover = np.array([1.962, 0.0, 0.0, 0.0])
    x = np.zeros(12)
    for _ in range(100):
        x = step_quadrotor(x, hover)
    assert np.max(np.abs(x)) < 1e-9


def test_quadrotor_free_fall_only_changes_vertical_velocity():
    x = step_quadrotor(np.zeros(12), np.zeros(4))
    expected = np.zeros(12)
    expected[8] = -9.81 * 0.025
    assert x[8] == pytest.approx(-0.24525, abs=1e-12)
    assert np.allclose(x, expected)


def test_quadrotor_roll_torque_changes_only_roll_rate():
    # gravity acts regardless of input; apart from it, only the roll rate moves
    c = 0.7
    x = step_quadrotor(np.zeros(12), np.array([0.0, c, 0.0, 0.0]))
    expected = np.zeros(12)
    expected[8] = -9.81 * 0.025
    expected[9] = 0.025 * 5.0 * c / 0.5
    assert np.allclose(x, expected)


def test_quadrotor_rotational_euler_coupling():
    # nonzero body rates couple through the inertia differences
    x = np.zeros(12)
    x[9:12] = [0.3, -0.2, 0.5]
    nxt = step_quadrotor(x, np.zeros(4))
    qd, rd, pd = x[10], x[11], x[9]
    assert nxt[9] == pytest.approx(pd + 0.025 * (0.1 - 0.3) * qd * rd / 0.5)
    assert nxt[10] == pytest.approx(qd + 0.025 * (0.3 - 0.5) * pd * rd / 0.1)
    assert nxt[11] == pytest.approx(rd + 0.025 * (0.5 - 0.1) * pd * qd / 0.3)


def test_quadrotor_angle_wrapping():
    x = np.zeros(12)
    x[5] = np.pi - 0.001  # yaw near the wrap boundary
    x[11] = 4.0  # strong yaw rate
    nxt = step_quadrotor(x, np.zeros(4))
    assert -np.pi < nxt[5] <= np.pi


def test_quadrotor_gimbal_guard():
    x = np.zeros(12)
    x[4] = np.pi / 2
    with pytest.raises(GimbalLockError):
        step_quadrotor(x, np.zeros(4))


def test_rollout_zero_horizon():
    states = rollout("planar", np.array([1.0, 2.0, 0.0, 0.0]), np.zeros((0, 2)))
    assert states.shape == (1, 4)
    assert np.array_equal(states[0], [1.0, 2.0, 0.0, 0.0])


def test_rollout_matches_closed_form_for_constant_control():
    x0 = np.array([0.5, -0.25, 0.8, -0.3])
    u = np.array([0.7, -0.2])
    horizon = 25
    states = rollout("planar", x0, np.tile(u, (horizon, 1)))
    lam, dt = 0.95, 0.05
    for t in range(horizon + 1):
        v_t = lam**t * x0[2:] + dt * u * (1 - lam**t) / (1 - lam)
        geom = (1 - lam**t) / (1 - lam)
        p_t = x0[:2] + dt * (x0[2:] * geom + dt * u * (t - geom) / (1 - lam))
        assert np.allclose(states[t, 2:], v_t, atol=1e-9)
        assert np.allclose(states[t, :2], p_t, atol=1e-9)


def test_rollout_deterministic():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=4)
    controls = rng.normal(size=(40, 2))
    a = rollout("planar", x0, controls)
    b = rollout("planar", x0, controls)
    assert np.array_equal(a, b)


def test_rollout_batch_flags_gimbal_lock():
    controls = np.zeros((2, 30, 4))
    controls[1, :, 2] = 60.0  # huge pitch torque drives q through pi/2
    x0 = np.zeros(12)
    states, valid = rollout_batch("quadrotor", x0, controls)
    assert valid[0]
    assert not valid[1]
    # the invalid trajectory freezes instead of producing NaNs
    assert np.isfinite(states).all()


def test_in_collision_conventions():
    sdf = free_sdf()
    assert not in_collision(sdf, np.array([2.0, 2.0, 0.0, 0.0]), "planar")
    assert in_collision(sdf, np.array([-0.1, 2.0, 0.0, 0.0]), "planar")  # out of bounds
    cells = np.zeros((64, 64, 64), dtype=bool)
    cells[32, 32, 32] = True
    sdf3 = occupancy_to_sdf(OccupancyGrid(cells, extent=4.0))
    # quadrotor bounding radius sqrt(0.1^2 + 0.025^2) ~ 0.103
    near = np.zeros(12)
    near[:3] = [2.03125 + 0.09, 2.03125, 2.03125]
    assert in_collision(sdf3, near, "quadrotor")
    far = np.zeros(12)
    far[:3] = [1.0, 1.0, 1.0]
    assert not in_collision(sdf3, far, "quadrotor")


def test_quadrotor_collision_threshold_value():
    r_bound = np.sqrt(0.1**2 + 0.025**2)
    assert dynamics.system_spec("quadrotor").radius == pytest.approx(r_bound)
    # sdf = 0.05 <= r_bound -> collision
    assert 0.05 <= r_bound


def test_trajectory_cost_zero_at_goal():
    sdf = free_sdf()
    goal = np.array([2.0, 2.0, 0.0, 0.0])
    states = np.tile(goal, (41, 1))
    cost = trajectory_cost(states, np.zeros((40, 2)), sdf, goal, "planar",
                           default_cost_params("planar"))
    assert cost == 0.0


def test_trajectory_cost_single_collision_adds_exactly_10000():
    cells = np.zeros((64, 64), dtype=bool)
    cells[:2, :2] = True
    sdf = occupancy_to_sdf(OccupancyGrid(cells, extent=4.0))
    goal = np.array([2.0, 2.0, 0.0, 0.0])
    states = np.tile(goal, (41, 1))
    base = trajectory_cost(states, np.zeros((40, 2)), sdf, goal, "planar",
                           default_cost_params("planar"))
    states_hit = states.copy()
    states_hit[5, :2] = [0.03, 0.03]  # inside the obstacle
    states_hit[5, 2:] = goal[2:]
    hit = trajectory_cost(states_hit, np.zeros((40, 2)), sdf, goal, "planar",
                          default_cost_params("planar"))
    d5 = goal_distance(states_hit[5], goal, "planar")
    assert hit - base == pytest.approx(10000.0 + 10.0 * d5)


def test_trajectory_cost_terminal_distance_weight():
    sdf = free_sdf()
    goal = np.array([2.0, 2.0, 0.0, 0.0])
    states = np.tile(goal, (2, 1))  # T = 1: no running states
    states[1, 0] += 1.0
    cost = trajectory_cost(states, np.zeros((1, 2)), sdf, goal, "planar",
                           default_cost_params("planar"))
    assert cost == pytest.approx(100.0)


def test_trajectory_cost_control_prior_term():
    sdf = free_sdf()
    goal = np.array([2.0, 2.0, 0.0, 0.0])
    states = np.tile(goal, (3, 1))
    controls = np.array([[1.0, 2.0], [0.0, -1.0]])
    params = CostParams(control_sigma=2.0)
    cost = trajectory_cost(states, controls, sdf, goal, "planar", params)
    assert cost == pytest.approx((1 + 4 + 1) / (2 * 4.0))


def test_trajectory_cost_monotone_in_goal_distance():
    sdf = free_sdf()
    goal = np.array([2.0, 2.0, 0.0, 0.0])
    params = default_cost_params("planar")
    base = np.tile(goal, (41, 1))
    costs = []
    for shift in (0.0, 0.1, 0.2, 0.5):
        states = base.copy()
        states[1:, 0] += shift
        costs.append(trajectory_cost(states, np.zeros((40, 2)), sdf, goal,
                                     "planar", params))
    assert np.all(np.diff(costs) > 0)


def test_quadrotor_goal_distance_selects_position_and_rates():
    x = np.zeros(12)
    x[:3] = [1.0, 2.0, 2.0]
    x[6:9] = [9.0, 9.0, 9.0]  # linear velocity ignored
    x[9:12] = [0.5, 0.0, 0.0]
    goal = np.zeros(12)
    goal[:3] = [2.0, 2.0, 2.0]
    assert goal_distance(x, goal, "quadrotor") == pytest.approx(1.0 + 0.01 * 0.5)


def test_batch_cost_marks_invalid_as_infinite():
    sdf = free_sdf()
    goal = np.array([2.0, 2.0, 0.0, 0.0])
    states = np.tile(goal, (3, 41, 1))
    controls = np.zeros((3, 40, 2))
    valid = np.array([True, False, True])
    costs = trajectory_cost_batch(states, controls, sdf, goal, "planar",
                                  default_cost_params("planar"), valid=valid)
    assert costs[0] == 0.0 and costs[2] == 0.0
    assert np.isinf(costs[1])
