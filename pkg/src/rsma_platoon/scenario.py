"""Road scenarios, reference trajectories and the wet-road acceleration limit.

Coordinates: x along the road, y lateral with lane centres at +w (left), 0
(centre) and -w (right) for lane width w.  Vehicle 0 is the lead vehicle;
vehicles 1..K are followers.  Every reference keeps the initial 10 m
longitudinal stagger, decelerates gently and moves laterally along a quintic
lane-change profile, so the heading and lateral velocity are smooth.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import Polytope, VehicleGeometry, box_polytope
from .errors import InvalidConfigError, InvalidWeatherError

GRAVITY = 9.81
LANES = {"left": 1, "center": 0, "right": -1}
SCENARIOS = ("s1", "s2")


@dataclass
class LaneChange:
    """Lateral move from ``y0`` to ``y1`` between times ``t0`` and ``t1`` (s)."""

    y0: float
    y1: float
    t0: float = 0.0
    t1: float = 0.0

    def profile(self, t):
        """(y, dy/dt) at times ``t``."""
        t = np.asarray(t, dtype=float)
        if self.t1 <= self.t0 or self.y0 == self.y1:
            return np.full(t.shape, self.y1 if self.t1 <= self.t0 else self.y0), np.zeros(t.shape)
        T = self.t1 - self.t0
        s = np.clip((t - self.t0) / T, 0.0, 1.0)
        D = self.y1 - self.y0
        y = self.y0 + D * (10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5)
        dy = D * (30 * s ** 2 - 60 * s ** 3 + 30 * s ** 4) / T
        return y, dy


@dataclass
class Scenario:
    name: str
    K: int
    T: int = 100
    dt: float = 0.05
    lane_width: float = 3.7
    lanes: int = 3
    geometry: VehicleGeometry = field(default_factory=VehicleGeometry)
    initial_states: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    references: np.ndarray = field(default_factory=lambda: np.zeros((0, 1, 4)))
    obstacles: list = field(default_factory=list)  # boxes (x0, x1, y0, y1)
    no_change_zone: tuple | None = None
    target_y: float = 0.0
    kappa: float | None = None
    accel_limit: np.ndarray | None = None  # (V, T) magnitude of the acceleration bound
    u_min: np.ndarray = field(default_factory=lambda: np.array([-4.0, -0.3]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([4.0, 0.3]))
    du_max: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.01]))
    z_min: np.ndarray | None = None
    z_max: np.ndarray | None = None

    def __post_init__(self):
        self.initial_states = np.asarray(self.initial_states, dtype=float)
        self.references = np.asarray(self.references, dtype=float)
        for name in ("u_min", "u_max", "du_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.lane_width <= self.geometry.width:
            raise InvalidConfigError("lane width must exceed the vehicle width")
        edge = self.lanes * self.lane_width / 2 - self.geometry.width / 2
        if self.z_min is None:
            self.z_min = np.array([-300.0, -edge, -0.5, 0.0])
        if self.z_max is None:
            self.z_max = np.array([600.0, edge, 0.5, 25.0])
        self.z_min = np.asarray(self.z_min, dtype=float)
        self.z_max = np.asarray(self.z_max, dtype=float)
        if np.any(self.z_min > self.z_max) or np.any(self.u_min > self.u_max) or np.any(self.du_max < 0):
            raise InvalidConfigError("bounds must be ordered")
        if self.accel_limit is None:
            self.accel_limit = np.full((self.V, self.T), float(min(-self.u_min[0], self.u_max[0])))
        self.accel_limit = np.asarray(self.accel_limit, dtype=float)
        if self.references.shape != (self.V, self.T + 1, 4):
            raise InvalidConfigError(
                f"references shaped {self.references.shape}, expected {(self.V, self.T + 1, 4)}")
        if np.any(np.abs(self.references[:, :, 1]) > edge + 1e-9):
            raise InvalidConfigError("references leave the road")

    @property
    def V(self) -> int:
        """Number of vehicles (lead plus followers)."""
        return self.initial_states.shape[0]

    def lane_center(self, lane: str) -> float:
        return LANES[lane] * self.lane_width

    def obstacle_polytopes(self) -> list[Polytope]:
        return [box_polytope(*b) for b in self.obstacles]

    def input_bounds(self, t: int):
        """Per-vehicle (lo, hi) input bounds at step ``t``, shapes (V, 2)."""
        lim = self.accel_limit[:, min(t, self.T - 1)]
        lo = np.tile(self.u_min, (self.V, 1))
        hi = np.tile(self.u_max, (self.V, 1))
        lo[:, 0] = np.maximum(lo[:, 0], -lim)
        hi[:, 0] = np.minimum(hi[:, 0], lim)
        return lo, hi

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        g = self.geometry
        return {
            "name": self.name, "K": self.K, "T": self.T, "dt": self.dt,
            "lane_width": self.lane_width, "lanes": self.lanes,
            "geometry": {"length": g.length, "width": g.width,
                         "front_axle": g.front_axle, "rear_axle": g.rear_axle},
            "initial_states": self.initial_states.tolist(),
            "references": self.references.tolist(),
            "obstacles": [list(map(float, b)) for b in self.obstacles],
            "no_change_zone": list(self.no_change_zone) if self.no_change_zone else None,
            "target_y": self.target_y,
            "kappa": self.kappa,
            "accel_limit": self.accel_limit.tolist(),
            "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(), "du_max": self.du_max.tolist(),
            "z_min": self.z_min.tolist(), "z_max": self.z_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["geometry"] = VehicleGeometry(**d.get("geometry", {}))
        if d.get("no_change_zone") is not None:
            d["no_change_zone"] = tuple(d["no_change_zone"])
        d["obstacles"] = [tuple(b) for b in d.get("obstacles", [])]
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _check_K(K: int):
    if not isinstance(K, (int, np.integer)) or not 2 <= K <= 9:
        raise InvalidConfigError(f"follower count must be in 2..9, got {K}")


def build_references(x0, moves: list[LaneChange], speed: float, decel: float, T: int, dt: float):
    """Reference states (V, T+1, 4) for vehicles starting at longitudinal ``x0``."""
    t = np.arange(T + 1) * dt
    vx = np.maximum(speed - decel * t, 0.0)
    xs = speed * t - 0.5 * decel * t ** 2
    out = np.zeros((len(moves), T + 1, 4))
    for i, (x_start, mv) in enumerate(zip(x0, moves)):
        y, vy = mv.profile(t)
        out[i, :, 0] = x_start + xs
        out[i, :, 1] = y
        out[i, :, 2] = np.arctan2(vy, vx)
        out[i, :, 3] = np.hypot(vx, vy)
    return out


def _layout(K: int, cycle: tuple[str, ...], lead_x: float, spacing: float, w: float):
    x0 = np.array([lead_x - spacing * i for i in range(K + 1)])
    lanes = [cycle[i % len(cycle)] for i in range(K + 1)]
    y0 = np.array([LANES[l] * w for l in lanes])
    return x0, lanes, y0


def scenario_s1(K: int = 3, *, T: int = 100, dt: float = 0.05, speed: float = 14.0, decel: float = 0.7,
                lead_x: float = 30.0, spacing: float = 10.0, obstacle_ahead: float = 60.0,
                obstacle_length: float = 5.0, lane_width: float = 3.7,
                geometry: VehicleGeometry | None = None) -> Scenario:
    """Obstacle over the left and centre lanes; everyone merges into the right lane."""
    _check_K(K)
    geometry = geometry or VehicleGeometry()
    w = lane_width
    x0, lanes, y0 = _layout(K, ("right", "center", "left"), lead_x, spacing, w)
    target = -w
    # time to finish depends on how many lanes have to be crossed
    finish = {"right": 0.0, "center": 3.75, "left": 4.25}
    moves = [LaneChange(y, target, 0.25 if lane != "right" else 0.0, finish[lane])
             for y, lane in zip(y0, lanes)]
    refs = build_references(x0, moves, speed, decel, T, dt)
    ox = lead_x + obstacle_ahead
    # covers the left lane and most of the centre lane, leaving the right lane clear
    obstacle = (ox, ox + obstacle_length, -w / 2 + 0.25, 1.5 * w - 0.25)
    init = refs[:, 0].copy()
    return Scenario("s1", K, T, dt, w, 3, geometry, init, refs, [obstacle], None, target)


def scenario_s2(K: int = 3, *, T: int = 100, dt: float = 0.05, speed: float = 14.0, decel: float = 0.7,
                lead_x: float = 30.0, spacing: float = 10.0, zone: tuple = (80.0, 120.0),
                lane_width: float = 3.7, geometry: VehicleGeometry | None = None) -> Scenario:
    """Crossroad ahead: everyone merges into the centre lane before the solid line starts."""
    _check_K(K)
    geometry = geometry or VehicleGeometry()
    w = lane_width
    x0, lanes, y0 = _layout(K, ("left", "right"), lead_x, spacing, w)
    target = 0.0
    moves = [LaneChange(y, target, 0.25, 3.25) for y in y0]
    refs = build_references(x0, moves, speed, decel, T, dt)
    # every reference must be settled before its front bumper reaches the zone
    front = refs[:, :, 0] + geometry.length / 2
    inside = front >= zone[0]
    t_axis = np.arange(T + 1) * dt
    for i, mv in enumerate(moves):
        if np.any(inside[i] & (t_axis < mv.t1)):
            raise InvalidConfigError(f"vehicle {i} cannot finish its lane change before the zone")
    init = refs[:, 0].copy()
    return Scenario("s2", K, T, dt, w, 3, geometry, init, refs, [], tuple(zone), target)


def make_scenario(name: str, K: int, **kw) -> Scenario:
    if name == "s1":
        return scenario_s1(K, **kw)
    if name == "s2":
        return scenario_s2(K, **kw)
    raise InvalidConfigError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")


# ---------------------------------------------------------------------------
# weather
# ---------------------------------------------------------------------------

def rain_adhesion(v, kappa: float):
    """Wet-road adhesion coefficient at speed ``v`` (m/s) and water-film level ``kappa``."""
    rho = 0.9458 - 0.0057 * np.asarray(v, dtype=float) - 0.0108 * float(kappa)
    if np.any(rho <= 0):
        raise InvalidWeatherError(f"adhesion is nonpositive for v={v}, kappa={kappa}")
    return float(rho) if np.ndim(rho) == 0 else rho


def rain_accel_threshold(rho):
    r = np.asarray(rho, dtype=float)
    if np.any((r <= 0) | (r > 1)):
        raise InvalidWeatherError(f"adhesion must lie in (0, 1], got {rho}")
    out = r * GRAVITY
    return float(out) if np.ndim(out) == 0 else out


def apply_weather(scenario: Scenario, kappa: float) -> Scenario:
    """Copy of ``scenario`` whose acceleration bound follows the wet-road limit.

    The adhesion is evaluated at each vehicle's reference speed for the step.
    """
    if kappa < 0:
        raise InvalidWeatherError(f"water-film level must be nonnegative, got {kappa}")
    v = scenario.references[:, : scenario.T, 3]
    thres = rain_accel_threshold(rain_adhesion(v, kappa))
    dry = min(-scenario.u_min[0], scenario.u_max[0])
    return replace(scenario, kappa=float(kappa), accel_limit=np.minimum(dry, thres))
