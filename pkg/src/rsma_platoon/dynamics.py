"""Kinematic bicycle model and rectangle collision geometry.

States are ``[x, y, heading, v]`` and inputs ``[accel, steer]``.  Two heading
update rules are available:

``"kinematic"`` (default)
    heading' = heading + v * sin(beta) / l_r * dt, the standard kinematic
    bicycle.  Signed in the steering direction, so right-hand lane changes are
    reachable.
``"printed"``
    heading' = heading + v * beta * tan(steer) / (l_f + l_r) * dt.  beta and
    tan(steer) always share a sign, so this rule can only turn left; it is kept
    for reference and is exercised by the tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidConfigError, SingularSteeringError

HEADING_RULES = ("kinematic", "printed")


@dataclass(frozen=True)
class VehicleGeometry:
    length: float = 4.5
    width: float = 1.8
    front_axle: float = 1.125
    rear_axle: float = 1.125

    def __post_init__(self):
        if min(self.length, self.width, self.front_axle, self.rear_axle) <= 0:
            raise InvalidConfigError("vehicle dimensions must be positive")
        if self.front_axle + self.rear_axle > self.length + 1e-12:
            raise InvalidConfigError("axle distances exceed the body length")

    @property
    def wheelbase(self) -> float:
        return self.front_axle + self.rear_axle


@dataclass(frozen=True)
class Polytope:
    """Set {p : A p <= b} with A (4, 2) and b (4,)."""

    A: np.ndarray
    b: np.ndarray

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.all(pts @ self.A.T <= self.b + tol, axis=1)

    def rectangle(self):
        """(center, heading, half_length, half_width) of the rectangle."""
        heading = math.atan2(-self.A[1, 0], self.A[1, 1])
        hl = 0.5 * (self.b[0] + self.b[2])
        hw = 0.5 * (self.b[1] + self.b[3])
        # A[:2] c = b[:2] - [hl, hw]
        center = np.linalg.solve(self.A[:2], self.b[:2] - np.array([hl, hw]))
        return center, heading, hl, hw


def _check_rule(rule: str):
    if rule not in HEADING_RULES:
        raise InvalidConfigError(f"unknown heading rule {rule!r}; expected one of {HEADING_RULES}")


def side_slip(steer: float, geom: VehicleGeometry = VehicleGeometry()) -> float:
    if abs(math.cos(steer)) < 1e-12:
        raise SingularSteeringError(f"steering angle {steer} is singular")
    return math.atan(math.tan(steer) * geom.rear_axle / geom.wheelbase)


def step(z, u, geom: VehicleGeometry = VehicleGeometry(), dt: float = 0.05,
         heading_rule: str = "kinematic") -> np.ndarray:
    """Advance one state by one step."""
    _check_rule(heading_rule)
    x, y, phi, v = (float(c) for c in z)
    a, d = float(u[0]), float(u[1])
    beta = side_slip(d, geom)
    if heading_rule == "printed":
        dphi = v * beta * math.tan(d) / geom.wheelbase
    else:
        dphi = v * math.sin(beta) / geom.rear_axle
    return np.array([x + v * math.cos(phi + beta) * dt,
                     y + v * math.sin(phi + beta) * dt,
                     phi + dphi * dt,
                     v + a * dt])


def rollout(z0, U, geom: VehicleGeometry = VehicleGeometry(), dt: float = 0.05,
            heading_rule: str = "kinematic") -> np.ndarray:
    """Roll out vehicles.  ``z0`` (V, 4), ``U`` (V, N, 2) -> (V, N+1, 4)."""
    _check_rule(heading_rule)
    z0 = np.ascontiguousarray(np.atleast_2d(z0), dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    if U.ndim == 2:
        U = U[None]
    return _kernels.rollout(z0, U, geom.front_axle, geom.rear_axle, dt, heading_rule == "printed")


def linearize(Z, U, geom: VehicleGeometry = VehicleGeometry(), dt: float = 0.05,
              heading_rule: str = "kinematic"):
    """Per-step Jacobians (A, B) of the step map at states Z[:, :N] and inputs U."""
    _check_rule(heading_rule)
    Z = np.ascontiguousarray(Z, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    return _kernels.jacobians(Z, U, geom.front_axle, geom.rear_axle, dt, heading_rule == "printed")


def rotation(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


def polytope_of(z, geom: VehicleGeometry = VehicleGeometry()) -> Polytope:
    R = rotation(float(z[2]))
    A = np.vstack([R.T, -R.T])
    half = np.array([geom.length / 2, geom.width / 2, geom.length / 2, geom.width / 2])
    b = half + A @ np.array([float(z[0]), float(z[1])])
    return Polytope(A, b)


def box_polytope(x0: float, x1: float, y0: float, y1: float) -> Polytope:
    """Axis-aligned box [x0, x1] x [y0, y1] as a polytope."""
    A = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    return Polytope(A, np.array([x1, y1, -x0, -y0], dtype=float))


def polytopes_intersect(P1: Polytope, P2: Polytope, tol: float = 0.0) -> bool:
    """Exact separating-axis test; touching boundaries count as overlap."""
    c1, a1, l1, w1 = P1.rectangle()
    c2, a2, l2, w2 = P2.rectangle()
    out = _kernels.rect_overlap_numpy(
        np.array([c1[0], c2[0]]), np.array([c1[1], c2[1]]), np.array([a1, a2]),
        np.array([l1, l2]), np.array([w1, w2]), tol)
    return bool(out[0, 1])


def overlap_matrix(rects, tol: float = 0.0) -> np.ndarray:
    """Pairwise overlap for rectangles given as rows (cx, cy, heading, half_len, half_wid)."""
    r = np.ascontiguousarray(np.atleast_2d(rects), dtype=float)
    return _kernels.rect_overlap(np.ascontiguousarray(r[:, 0]), np.ascontiguousarray(r[:, 1]),
                                 np.ascontiguousarray(r[:, 2]), np.ascontiguousarray(r[:, 3]),
                                 np.ascontiguousarray(r[:, 4]), tol)


def disc_radius(geom: VehicleGeometry = VehicleGeometry(), margin: float = 0.2) -> float:
    return math.hypot(geom.length / 4, geom.width / 2) + margin


def disc_cover(z, geom: VehicleGeometry = VehicleGeometry(), margin: float = 0.2):
    """Two discs whose union covers the body: list of (center, radius)."""
    if margin < 0:
        raise InvalidConfigError(f"margin must be nonnegative, got {margin}")
    r = disc_radius(geom, margin)
    off = geom.length / 4 * np.array([math.cos(z[2]), math.sin(z[2])])
    c = np.array([float(z[0]), float(z[1])])
    return [(c + off, r), (c - off, r)]
