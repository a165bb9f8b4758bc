import warnings
from dataclasses import replace

import numpy as np
import pytest

from rsma_platoon.dynamics import VehicleGeometry, disc_radius, linearize, rollout, step
from rsma_platoon.errors import InvalidConfigError
from rsma_platoon.metrics import bound_violation, motion_stats
from rsma_platoon.mpc import (HorizonProblem, MpcConfig, any_collision, box_nearest, disc_centers,
                              estimation_gaps, exact_cost, receding_run, solve_horizon)
from rsma_platoon.scenario import LaneChange, apply_weather, rain_accel_threshold, rain_adhesion, scenario_s1

G = VehicleGeometry()
ZMIN = np.array([-300.0, -4.65, -0.5, 0.0])
ZMAX = np.array([600.0, 4.65, 0.5, 25.0])


def straight_problem(N=10, speed=14.0, y_ref=0.0, z0=None, obstacles=(), u_prev=None, t0=0):
    """Straight road; ``y_ref`` is reached by a smooth lane change during the first two seconds."""
    z0 = np.array([[0.0, 0.0, 0.0, speed]]) if z0 is None else np.atleast_2d(z0)
    V = z0.shape[0]
    t = (t0 + np.arange(1, N + 1)) * 0.05
    y, vy = LaneChange(0.0, y_ref, 0.0, 2.0).profile(t)
    refs = np.zeros((V, N, 4))
    refs[:, :, 0] = speed * t
    refs[:, :, 1] = y
    refs[:, :, 2] = np.arctan2(vy, speed)
    refs[:, :, 3] = speed
    lo = np.broadcast_to([-4.0, -0.3], (V, N, 2)).copy()
    hi = -lo
    u_prev = np.zeros((V, 2)) if u_prev is None else u_prev
    return HorizonProblem(z0, refs, u_prev, lo, hi, np.array([1.0, 0.01]), ZMIN, ZMAX, list(obstacles))


def test_on_reference_gives_zero_inputs():
    res = solve_horizon(straight_problem(), MpcConfig())
    assert np.max(np.abs(res.inputs)) < 1e-4
    assert res.cost == pytest.approx(0.0, abs=1e-8)


def test_stationary_vehicle():
    res = solve_horizon(straight_problem(speed=0.0), MpcConfig())
    assert np.max(np.abs(res.u_first)) < 1e-4


def test_effort_only_weights_give_zero_inputs():
    cfg = MpcConfig(Q_z=(0, 0, 0, 0), Q_u=(1, 1), Q_du=(0, 0))
    res = solve_horizon(straight_problem(y_ref=2.0, speed=12.0), cfg)
    np.testing.assert_allclose(res.inputs, 0.0, atol=1e-6)


def test_inconsistent_shapes():
    prob = straight_problem()
    prob.lo = prob.lo[:, :3]
    with pytest.raises(InvalidConfigError):
        solve_horizon(prob, MpcConfig())


def test_obstacle_ahead_forces_lateral_clearance():
    # 20 m of free road between the front bumper and the box
    box = (22.25, 27.25, -1.0, 1.0)
    prob = straight_problem(N=40, obstacles=[box])
    res = solve_horizon(prob, MpcConfig(max_inner_iters=30))
    r = disc_radius(G, 0.2)
    C, _ = disc_centers(res.states[:, 1:], G)
    _, dist = box_nearest(C, box)
    assert dist.min() >= r - 1e-6
    assert np.abs(res.states[0, :, 1]).max() > 1.0
    assert not any(any_collision(res.states[:, j], G, [box]) for j in range(41))


def test_plan_matches_exact_rollout():
    prob = straight_problem(y_ref=1.0)
    res = solve_horizon(prob, MpcConfig())
    np.testing.assert_allclose(res.states, rollout(prob.z0, res.inputs, G, 0.05), atol=0.0)
    np.testing.assert_array_equal(res.u_first, res.inputs[:, 0])
    assert res.status == "converged" and res.iterations <= MpcConfig().max_inner_iters


def test_merit_nonincreasing():
    res = solve_horizon(straight_problem(y_ref=1.0), MpcConfig())
    m = res.merits
    assert all(b <= a + 1e-8 * (1 + abs(a)) for a, b in zip(m, m[1:]))


def test_single_vehicle_reaches_offset_reference():
    # closed loop on a reference that moves 1 m to the left
    cfg = MpcConfig()
    z = np.array([[0.0, 0.0, 0.0, 14.0]])
    u_prev = np.zeros((1, 2))
    guess = None
    for t in range(60):
        prob = straight_problem(z0=z, y_ref=1.0, u_prev=u_prev, t0=t)
        res = solve_horizon(prob, cfg, guess)
        assert res.status == "converged"
        u_prev = res.u_first[None] if res.u_first.ndim == 1 else res.u_first
        z = rollout(z, u_prev[:, None], G, 0.05)[:, 1]
        guess = np.concatenate([res.inputs[:, 1:], res.inputs[:, -1:]], axis=1)
    assert abs(res.states[0, -1, 1] - 1.0) < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_linearisation_error_is_second_order(seed):
    rng = np.random.default_rng(seed)
    z = np.array([0.0, 0.0, rng.uniform(-0.2, 0.2), rng.uniform(8, 16)])
    u = np.array([rng.uniform(-2, 2), rng.uniform(-0.2, 0.2)])
    A, B = linearize(z[None, None], u[None, None])
    A, B = A[0, 0], B[0, 0]
    dz = rng.normal(size=4) * [0.5, 0.5, 0.05, 0.5]
    du = rng.normal(size=2) * [0.5, 0.05]

    def err(s):
        exact = step(z + s * dz, u + s * du)
        lin = step(z, u) + A @ (s * dz) + B @ (s * du)
        return np.linalg.norm(exact - lin)

    assert err(1.0) >= 3.0 * err(0.5)


def test_estimation_gaps_shape_and_zero_for_constant_input():
    U = np.tile([0.5, 0.02], (2, 8, 1))
    Z = rollout(np.array([[0, 0, 0, 10.0], [-10, 0, 0, 10.0]]), U, G, 0.05)
    gaps = estimation_gaps(Z, U, G, 0.05)
    assert gaps.shape == (2, 9)
    np.testing.assert_allclose(gaps, 0.0, atol=1e-12)


def test_penalty_enters_cost():
    prob = straight_problem(y_ref=1.0)
    U = np.tile([0.3, 0.02], (1, 10, 1))
    U[:, 5:] = [-0.3, -0.02]
    base, _ = exact_cost(prob, U, MpcConfig())
    prob.penalty = np.full((1, 10), 50.0)
    pen, _ = exact_cost(prob, U, MpcConfig())
    assert pen > base


# -- closed-loop scenario runs -------------------------------------------------

@pytest.fixture(scope="module")
def s1_trace():
    sc = scenario_s1(3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return sc, receding_run(sc)


def test_straight_formation_tracks_reference():
    sc = scenario_s1(2, T=40)
    refs = sc.references.copy()
    refs[:, :, 1] = sc.initial_states[:, 1:2]
    refs[:, :, 2] = 0.0
    refs[:, :, 3] = np.hypot(refs[:, :, 3], 0.0)
    t = np.arange(41) * sc.dt
    refs[:, :, 0] = sc.initial_states[:, :1] + 14.0 * t
    refs[:, :, 3] = 14.0
    sc = replace(sc, references=refs, obstacles=[])
    tr = receding_run(sc)
    assert np.max(np.abs(tr.states[:, :, :2] - refs[:, :, :2])) < 0.1


def test_s1_safe_and_within_bounds(s1_trace):
    sc, tr = s1_trace
    assert not tr.collision_flags.any()
    assert all(v == 0.0 for v in bound_violation(tr, sc).values())
    assert np.max(np.abs(tr.states[:, -1, 1] - sc.target_y)) < 0.2


def test_s1_velocity_variance_band(s1_trace):
    _, tr = s1_trace
    var = motion_stats(tr)["velocity"]["variance"]
    assert 0.5 * 0.1843 <= var <= 1.5 * 0.1843


def test_first_inputs_respect_rate_limit(s1_trace):
    sc, tr = s1_trace
    prev = np.concatenate([np.zeros((sc.V, 1, 2)), tr.inputs[:, :-1]], axis=1)
    assert np.all(np.abs(tr.inputs - prev) <= sc.du_max)


def test_rain_bound_holds():
    sc = apply_weather(scenario_s1(2, T=60), 60.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tr = receding_run(sc)
    limit = rain_accel_threshold(rain_adhesion(sc.references[:, :60, 3], 60.0))
    assert np.all(np.abs(tr.inputs[:, :, 0]) <= limit)
