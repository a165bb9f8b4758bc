import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsma_platoon.dynamics import (VehicleGeometry, box_polytope, disc_cover, disc_radius, linearize, polytope_of,
                                   polytopes_intersect, rollout, rotation, side_slip, step)
from rsma_platoon.errors import InvalidConfigError, SingularSteeringError

G = VehicleGeometry()


def test_side_slip_examples():
    assert side_slip(0.0) == 0.0
    s = 0.2
    assert side_slip(s) == pytest.approx(math.atan(math.tan(s) / 2))
    assert side_slip(0.3) == pytest.approx(0.1534522, abs=1e-6)
    with pytest.raises(SingularSteeringError):
        side_slip(math.pi / 2)


@pytest.mark.parametrize("rule", ["kinematic", "printed"])
def test_step_straight(rule):
    np.testing.assert_allclose(step([0, 0, 0, 10], [0, 0], dt=0.05, heading_rule=rule), [0.5, 0, 0, 10])
    np.testing.assert_allclose(step([0, 0, 0, 10], [2, 0], dt=0.05, heading_rule=rule), [0.5, 0, 0, 10.1])


def test_step_steering_against_hand_oracle():
    beta = math.atan(math.tan(0.1) * 1.125 / 2.25)
    assert beta == pytest.approx(0.0501253, abs=1e-6)
    z = step([0, 0, 0, 10], [0, 0.1], dt=0.05, heading_rule="printed")
    expected = [0.5 * math.cos(beta), 0.5 * math.sin(beta), 10 * beta * math.tan(0.1) / 2.25 * 0.05, 10]
    np.testing.assert_allclose(z, expected, rtol=1e-12)
    z = step([0, 0, 0, 10], [0, 0.1], dt=0.05)
    assert z[2] == pytest.approx(10 * math.sin(beta) / 1.125 * 0.05, rel=1e-12)


def test_unknown_rule():
    with pytest.raises(InvalidConfigError):
        step([0, 0, 0, 1], [0, 0], heading_rule="bogus")


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(-3, 3), st.floats(0, 30))
def test_zero_input_keeps_speed_and_heading(x, y, phi, v):
    z = step([x, y, phi, v], [0, 0])
    assert z[2] == phi and z[3] == v


@settings(max_examples=30)
@given(st.lists(st.floats(-1, 1), min_size=20, max_size=20), st.sampled_from(["kinematic", "printed"]))
def test_rollout_matches_step(u, rule):
    U = np.array(u).reshape(10, 2) * [2.0, 0.3]
    Z = rollout([0, 0, 0.1, 12], U, heading_rule=rule)[0]
    z = np.array([0, 0, 0.1, 12.0])
    for j in range(10):
        z = step(z, U[j], heading_rule=rule)
        np.testing.assert_allclose(Z[j + 1], z, rtol=1e-12, atol=1e-12)


def test_linearize_matches_finite_differences():
    rng = np.random.default_rng(3)
    U = rng.uniform([-2, -0.2], [2, 0.2], (1, 5, 2))
    Z = rollout([0, 0, 0.05, 13], U)
    A, B = linearize(Z, U)
    h = 1e-6
    for j in range(5):
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd = (step(Z[0, j] + e, U[0, j]) - step(Z[0, j] - e, U[0, j])) / (2 * h)
            np.testing.assert_allclose(A[0, j][:, i], fd, atol=1e-7)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (step(Z[0, j], U[0, j] + e) - step(Z[0, j], U[0, j] - e)) / (2 * h)
            np.testing.assert_allclose(B[0, j][:, i], fd, atol=1e-7)


def test_rotation():
    np.testing.assert_allclose(rotation(0.0), np.eye(2))
    np.testing.assert_allclose(rotation(math.pi / 2), [[0, -1], [1, 0]], atol=1e-15)
    np.testing.assert_allclose(rotation(0.7) @ rotation(-0.7), np.eye(2), atol=1e-15)


@given(st.floats(-10, 10), st.lists(st.floats(-100, 100), min_size=2, max_size=2))
def test_rotation_preserves_norm(phi, x):
    x = np.array(x)
    assert np.linalg.norm(rotation(phi) @ x) == pytest.approx(np.linalg.norm(x), rel=1e-12, abs=1e-12)


def test_polytope_examples():
    P = polytope_of([0, 0, 0, 10])
    corners = np.array([[2.25, 0.9], [-2.25, 0.9], [2.25, -0.9], [-2.25, -0.9]])
    assert P.contains(corners, tol=1e-12).all()
    assert not P.contains(corners * 1.01).any()
    Q = polytope_of([10, 0, 0, 10])
    np.testing.assert_allclose(Q.b - P.b, P.A @ [10, 0])
    R = polytope_of([0, 0, math.pi / 2, 10])
    assert R.contains([[0.0, 2.2], [0.0, -2.2], [0.85, 0.0]]).all()
    assert not R.contains([[2.2, 0.0], [-2.2, 0.0], [0.0, 2.3]]).any()


def _inside(pts, c, phi, hl, hw):
    d = (pts - c) @ rotation(phi)
    return (np.abs(d[:, 0]) <= hl) & (np.abs(d[:, 1]) <= hw)


@settings(max_examples=30)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi))
def test_polytope_membership_oracle(x, y, phi):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-8, 8, (1000, 2))
    P = polytope_of([x, y, phi, 0])
    np.testing.assert_array_equal(P.contains(pts), _inside(pts, np.array([x, y]), phi, 2.25, 0.9))


def test_intersect_examples():
    P = polytope_of([0, 0, 0, 0])
    assert polytopes_intersect(P, P)
    assert not polytopes_intersect(box_polytope(-0.5, 0.5, -0.5, 0.5), box_polytope(2.5, 3.5, -0.5, 0.5))
    assert polytopes_intersect(P, polytope_of([4.0, 0, 0, 0]))


def _sample_overlap(z1, z2, n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, (n, 2)) * [2.25, 0.9]
    pts = np.array(z1[:2]) + u @ rotation(z1[2]).T
    return bool(_inside(pts, np.array(z2[:2]), z2[2], 2.25, 0.9).any())


@settings(max_examples=60)
@given(st.floats(-6, 6), st.floats(-4, 4), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_intersect_against_sampling(dx, dy, a1, a2):
    z1, z2 = [0.0, 0.0, a1], [dx, dy, a2]
    P1, P2 = polytope_of(z1 + [0]), polytope_of(z2 + [0])
    exact = polytopes_intersect(P1, P2)
    assert exact == polytopes_intersect(P2, P1)
    if _sample_overlap(z1, z2):
        assert exact
    if exact and not _sample_overlap(z1, z2):
        # sampling may only miss overlaps that are shallow along some separating axis
        assert not polytopes_intersect(P1, P2, tol=-0.2)


def test_disc_cover_examples():
    assert disc_radius(G, 0.0) == pytest.approx(math.sqrt(1.125 ** 2 + 0.9 ** 2))
    assert disc_radius(G, 0.0) == pytest.approx(1.4408, abs=1e-4)
    (c1, _), (c2, _) = disc_cover([0, 0, 0, 0], G, 0.0)
    np.testing.assert_allclose([c1, c2], [[1.125, 0], [-1.125, 0]])
    with pytest.raises(InvalidConfigError):
        disc_cover([0, 0, 0, 0], G, -0.1)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-math.pi, math.pi), st.floats(0, 1))
def test_disc_cover_covers_corners(x, y, phi, margin):
    discs = disc_cover([x, y, phi, 0], G, margin)
    corners = np.array([x, y]) + np.array([[2.25, 0.9], [-2.25, 0.9], [2.25, -0.9], [-2.25, -0.9]]) @ rotation(phi).T
    for c in corners:
        assert min(np.linalg.norm(c - d) - r for d, r in discs) <= 1e-9


@settings(max_examples=100)
@given(st.floats(-8, 8), st.floats(-5, 5), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_disc_separation_is_sound(dx, dy, a1, a2):
    z1, z2 = [0, 0, a1, 0], [dx, dy, a2, 0]
    d1, d2 = disc_cover(z1, G, 0.0), disc_cover(z2, G, 0.0)
    separated = all(np.linalg.norm(c1 - c2) > r1 + r2 for c1, r1 in d1 for c2, r2 in d2)
    if separated:
        assert not polytopes_intersect(polytope_of(z1), polytope_of(z2))
