import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsma_platoon.dynamics import polytope_of, polytopes_intersect
from rsma_platoon.errors import InvalidConfigError, InvalidWeatherError
from rsma_platoon.mpc import _zone_mask
from rsma_platoon.scenario import (GRAVITY, LaneChange, Scenario, apply_weather, make_scenario, rain_accel_threshold,
                                   rain_adhesion, scenario_s1, scenario_s2)


def test_s1_layout():
    sc = scenario_s1(4)
    assert sc.V == 5 and sc.initial_states.shape == (5, 4)
    assert len(sc.obstacles) == 1
    for P in sc.obstacle_polytopes():
        for z in sc.initial_states:
            assert not polytopes_intersect(P, polytope_of(z, sc.geometry))
    np.testing.assert_allclose(sc.references[:, -1, 1], -3.7, atol=0.1)


def test_s1_obstacle_blocks_left_and_centre():
    sc = scenario_s1(3)
    x0, x1, y0, y1 = sc.obstacles[0]
    assert y0 < 0.0 < 3.7 < y1
    assert y0 > -3.7 + sc.geometry.width / 2


@pytest.mark.parametrize("K", [1, 10])
def test_follower_count_range(K):
    with pytest.raises(InvalidConfigError):
        scenario_s1(K)
    with pytest.raises(InvalidConfigError):
        scenario_s2(K)


def test_unknown_scenario():
    with pytest.raises(InvalidConfigError):
        make_scenario("s3", 3)


def test_s2_lane_changes_finish_before_zone():
    sc = scenario_s2(4)
    front = sc.references[:, :, 0] + sc.geometry.length / 2
    ydot = np.gradient(sc.references[:, :, 1], sc.dt, axis=1)
    inside = _zone_mask(sc.references[:, :, 0], sc.geometry, sc.no_change_zone)
    assert inside.any()
    assert np.all(np.abs(sc.references[:, :, 1][inside] - sc.target_y) == 0.0)
    assert np.all(ydot[inside] == 0.0)
    assert np.all(front[inside] >= sc.no_change_zone[0])


def test_lane_change_profile():
    mv = LaneChange(0.0, 3.7, 1.0, 3.0)
    y, dy = mv.profile(np.array([0.0, 1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_allclose(y, [0, 0, 1.85, 3.7, 3.7])
    assert dy[0] == dy[-1] == 0.0 and dy[2] > 0


def test_references_reachable_by_nominal_tracking():
    # a simple proportional controller on the exact model keeps up with the references
    from rsma_platoon.dynamics import step
    sc = scenario_s1(3)
    for i in range(sc.V):
        z = sc.initial_states[i].copy()
        worst = 0.0
        for t in range(sc.T):
            ref = sc.references[i, t + 1]
            a = np.clip((ref[3] - z[3]) / sc.dt, -4, 4)
            ey = ref[1] - z[1]
            d = np.clip(0.4 * ey + 1.2 * (ref[2] - z[2]), -0.3, 0.3)
            z = step(z, [a, d], sc.geometry, sc.dt)
            worst = max(worst, abs(z[1] - ref[1]))
        assert worst < 0.5


def test_roundtrip(tmp_path):
    sc = apply_weather(scenario_s2(3), 30.0)
    sc.save(tmp_path / "sc.json")
    back = Scenario.load(tmp_path / "sc.json")
    np.testing.assert_array_equal(back.references, sc.references)
    np.testing.assert_array_equal(back.accel_limit, sc.accel_limit)
    assert back.no_change_zone == sc.no_change_zone and back.kappa == sc.kappa


@pytest.mark.parametrize("v,kappa,rho", [(0.0, 0.0, 0.9458), (14.2, 20.0, 0.6489), (10.0, 0.0, 0.8888)])
def test_rain_adhesion(v, kappa, rho):
    assert rain_adhesion(v, kappa) == pytest.approx(rho, abs=1e-4)


def test_rain_adhesion_invalid():
    with pytest.raises(InvalidWeatherError):
        rain_adhesion(14.0, 100.0)


@given(st.floats(0, 20), st.floats(0, 40), st.floats(0.01, 5))
def test_rain_adhesion_decreasing(v, kappa, d):
    assert rain_adhesion(v + d, kappa) < rain_adhesion(v, kappa)
    assert rain_adhesion(v, kappa + d) < rain_adhesion(v, kappa)
    assert rain_adhesion(v + d, kappa) - rain_adhesion(v, kappa) == pytest.approx(-0.0057 * d)


def test_accel_threshold():
    assert rain_accel_threshold(1.0) == pytest.approx(GRAVITY)
    assert rain_accel_threshold(0.6489) == pytest.approx(6.366, abs=1e-3)
    with pytest.raises(InvalidWeatherError):
        rain_accel_threshold(0.0)


def test_apply_weather_regimes():
    sc = scenario_s1(3)
    dry = sc.input_bounds(10)
    for kappa in (0.0, 20.0):
        lo, hi = apply_weather(sc, kappa).input_bounds(10)
        np.testing.assert_array_equal(hi, dry[1])
        np.testing.assert_array_equal(lo, dry[0])
    wet = apply_weather(sc, 60.0)
    lo, hi = wet.input_bounds(10)
    assert np.all(hi[:, 0] < 4.0) and np.all(lo[:, 0] > -4.0)
    expected = rain_adhesion(sc.references[:, 10, 3], 60.0) * GRAVITY
    np.testing.assert_allclose(hi[:, 0], expected)
    with pytest.raises(InvalidWeatherError):
        apply_weather(sc, -1.0)
