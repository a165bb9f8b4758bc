"""Receding-horizon platoon controller.

Each horizon is solved by sequential convex programming: the bicycle model is
linearised about a guess trajectory and the input deviations ``du`` become the
decision variables (state deviations are condensed into ``S @ du``).  The
quadratic program keeps input bounds, input-rate bounds and a trust region as
hard constraints.  Road bounds, disc separation, obstacle clearance and the
no-lane-change zone are softened by one shared slack with a large linear
price, so every linearisation stays feasible.  A step is accepted only when
the exact merit (cost from the nonlinear rollout plus the priced violation)
does not increase; otherwise the trust region is halved.

The channel-estimation penalty uses the motion coefficient of a follower as
the gap between its true state and the state predicted with the previous
input.  To first order that gap is ``B @ (u_j - u_{j-1})``, so the penalty is
a convex quadratic in the input rates, weighted by the precoder power and the
path gain from the communication block.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .convex import ConvexProgram
from .dynamics import VehicleGeometry, disc_radius, linearize, overlap_matrix, rollout
from .errors import CollisionError, InvalidConfigError, PlatoonError
from .scenario import Scenario


@dataclass
class MpcConfig:
    horizon: int = 10
    Q_z: tuple = (1.0, 100.0, 1.0, 0.1)
    Q_u: tuple = (1.0, 1.0)
    Q_du: tuple = (1.0, 1.0)
    Q_h: float = 100.0
    max_inner_iters: int = 10
    tol: float = 1e-5
    disc_margin: float = 0.2
    state_trust: tuple = (1.0, 1.0, 0.1, 1.0)
    soft_price: float = 1e6
    zone_lateral_speed: float = 2e-4
    near: float = 4.0
    heading_rule: str = "kinematic"

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidConfigError(f"horizon must be at least 1, got {self.horizon}")
        for name in ("Q_z", "Q_u", "Q_du"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0):
                raise InvalidConfigError(f"{name} must be nonnegative")
        if len(self.Q_z) != 4 or len(self.Q_u) != 2 or len(self.Q_du) != 2:
            raise InvalidConfigError("Q_z needs 4 entries, Q_u and Q_du need 2")
        if self.Q_h < 0 or self.max_inner_iters < 1 or self.tol <= 0:
            raise InvalidConfigError("invalid penalty weight, iteration budget or tolerance")

    # weights act inside the norm, so the squared weights multiply squared errors
    @property
    def wz(self) -> np.ndarray:
        return np.asarray(self.Q_z, dtype=float) ** 2

    @property
    def wu(self) -> np.ndarray:
        return np.asarray(self.Q_u, dtype=float) ** 2

    @property
    def wdu(self) -> np.ndarray:
        return np.asarray(self.Q_du, dtype=float) ** 2


@dataclass
class CsitPenalty:
    """Precoder-dependent factor of the channel-estimation penalty.

    ``precoder_power4`` is (V, T) with ||p_k(t)||^4 in W^2 (zero for the
    lead vehicle).  The path gain is ``antennas * d^(-2 mu)``.
    """

    precoder_power4: np.ndarray
    antennas: int = 4
    mu: float = 2.0

    def weights(self, dist, steps, Q_h: float, zmax_norm: float) -> np.ndarray:
        p4 = self.precoder_power4[:, np.clip(steps, 0, self.precoder_power4.shape[1] - 1)]
        gain = self.antennas * np.maximum(dist, 1e-3) ** (-2 * self.mu)
        return Q_h * p4 * gain / (4.0 * zmax_norm ** 2)


@dataclass
class HorizonProblem:
    """One horizon: V vehicles, N steps."""

    z0: np.ndarray           # (V, 4)
    refs: np.ndarray         # (V, N, 4) references for steps 1..N
    u_prev: np.ndarray       # (V, 2) last applied input
    lo: np.ndarray           # (V, N, 2)
    hi: np.ndarray
    du_max: np.ndarray       # (2,)
    z_min: np.ndarray
    z_max: np.ndarray
    obstacles: list = field(default_factory=list)
    zone: tuple | None = None
    zone_y: float = 0.0
    zone_half: float = 0.0
    penalty: np.ndarray | None = None  # (V, N) weights on ||B (u_j - u_{j-1})||^2
    geometry: VehicleGeometry = field(default_factory=VehicleGeometry)
    dt: float = 0.05

    @property
    def V(self) -> int:
        return self.z0.shape[0]

    @property
    def N(self) -> int:
        return self.refs.shape[1]

    def check(self):
        V, N = self.V, self.N
        if self.refs.shape != (V, N, 4) or self.u_prev.shape != (V, 2):
            raise InvalidConfigError("horizon arrays have inconsistent shapes")
        if self.lo.shape != (V, N, 2) or self.hi.shape != (V, N, 2):
            raise InvalidConfigError("input bounds have inconsistent shapes")
        if self.penalty is not None and self.penalty.shape != (V, N):
            raise InvalidConfigError("penalty weights have inconsistent shape")


@dataclass
class HorizonResult:
    u_first: np.ndarray
    inputs: np.ndarray
    states: np.ndarray
    merit: float
    cost: float
    violation: float
    status: str
    iterations: int
    merits: list


@dataclass
class PlatoonTrace:
    states: np.ndarray            # (V, T+1, 4)
    inputs: np.ndarray            # (V, T, 2)
    objectives: list
    collision_flags: np.ndarray   # (T+1,)
    statuses: list
    inner_iterations: list
    clearance: np.ndarray         # (T+1,) smallest disc-surface gap between vehicles
    dt: float = 0.05

    @property
    def T(self) -> int:
        return self.inputs.shape[1]


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def disc_centers(Z, geom: VehicleGeometry):
    """Disc centres (..., 2, 2) and their state Jacobians (..., 2, 2, 4)."""
    Z = np.asarray(Z, dtype=float)
    off = geom.length / 4
    c, s = np.cos(Z[..., 2]), np.sin(Z[..., 2])
    sign = np.array([1.0, -1.0])
    C = np.empty(Z.shape[:-1] + (2, 2))
    C[..., 0] = Z[..., None, 0] + sign * off * c[..., None]
    C[..., 1] = Z[..., None, 1] + sign * off * s[..., None]
    J = np.zeros(Z.shape[:-1] + (2, 2, 4))
    J[..., 0, 0] = 1.0
    J[..., 1, 1] = 1.0
    J[..., 0, 2] = -sign * off * s[..., None]
    J[..., 1, 2] = sign * off * c[..., None]
    return C, J


def box_nearest(P, box):
    """Nearest box points (..., 2) and signed distances (negative inside)."""
    x0, x1, y0, y1 = box
    q = np.stack([np.clip(P[..., 0], x0, x1), np.clip(P[..., 1], y0, y1)], -1)
    d = np.linalg.norm(P - q, axis=-1)
    inside = d == 0
    if np.any(inside):
        pen = np.stack([P[..., 0] - x0, x1 - P[..., 0], P[..., 1] - y0, y1 - P[..., 1]], -1)
        d = np.where(inside, -pen.min(-1), d)
    return q, d


def _zone_mask(X, geom: VehicleGeometry, zone, pad: float = 0.0):
    if zone is None:
        return np.zeros(np.shape(X), dtype=bool)
    return (X + geom.length / 2 + pad >= zone[0]) & (X - geom.length / 2 - pad <= zone[1])


def _rects(states, geom: VehicleGeometry, boxes=()):
    rows = [[z[0], z[1], z[2], geom.length / 2, geom.width / 2] for z in states]
    for x0, x1, y0, y1 in boxes:
        rows.append([(x0 + x1) / 2, (y0 + y1) / 2, 0.0, (x1 - x0) / 2, (y1 - y0) / 2])
    return np.array(rows, dtype=float)


def any_collision(states, geom: VehicleGeometry, boxes=()) -> bool:
    """Exact rectangle test among vehicles and against obstacle boxes."""
    ov = overlap_matrix(_rects(states, geom, boxes))
    nv = len(states)
    ov = ov.copy()
    np.fill_diagonal(ov, False)
    ov[nv:, nv:] = False
    return bool(ov.any())


def min_clearance(states, geom: VehicleGeometry) -> float:
    """Smallest gap between the (margin-free) disc covers of two vehicles."""
    C, _ = disc_centers(states, geom)
    r = disc_radius(geom, 0.0)
    V = C.shape[0]
    if V < 2:
        return math.inf
    d = np.linalg.norm(C[:, None, :, None] - C[None, :, None, :], axis=-1)
    iu = np.triu_indices(V, 1)
    return float(d[iu].min() - 2 * r)


# ---------------------------------------------------------------------------
# program assembly
# ---------------------------------------------------------------------------

@dataclass
class _Lin:
    U: np.ndarray
    Z: np.ndarray
    B: np.ndarray
    S: np.ndarray


def _linearize(prob: HorizonProblem, U, rule: str) -> _Lin:
    Z = rollout(prob.z0, U, prob.geometry, prob.dt, rule)
    A, B = linearize(Z, U, prob.geometry, prob.dt, rule)
    S = _kernels.condense(np.ascontiguousarray(A), np.ascontiguousarray(B))
    return _Lin(U, Z, B, S)


def build_horizon_program(prob: HorizonProblem, config: MpcConfig, U_guess, radius: float = 1.0,
                          lin: _Lin | None = None):
    """Quadratic program in the input deviations about ``U_guess``.

    Returns ``(program, lin, x0)`` where ``x0`` is the zero deviation with a
    slack that makes every softened row satisfied.
    """
    prob.check()
    V, N = prob.V, prob.N
    U = np.asarray(U_guess, dtype=float)
    if U.shape != (V, N, 2):
        raise InvalidConfigError(f"guess inputs shaped {U.shape}, expected {(V, N, 2)}")
    lin = lin or _linearize(prob, U, config.heading_rule)
    Z, S, Bm = lin.Z, lin.S, lin.B
    geom = prob.geometry
    W = 2 * N
    prog = ConvexProgram()
    steps = np.arange(N)
    trust = radius * prob.du_max[None, None, :] * (steps[None, :, None] + 1)
    lo = np.maximum(prob.lo - U, -trust)
    hi = np.minimum(prob.hi - U, trust)
    if np.any(lo > 1e-12) or np.any(hi < -1e-12):
        raise InvalidConfigError("guess inputs lie outside the input bounds")
    lo = np.minimum(lo, -1e-9)
    hi = np.maximum(hi, 1e-9)
    du = prog.add_variable("du", (V, N, 2), lb=lo, ub=hi)
    slack = prog.add_variable("slack", (), lb=0.0)
    blk = du.reshape(V, W)

    # -- objective --------------------------------------------------------
    wz, wu, wdu = config.wz, config.wu, config.wdu
    err = Z[:, 1:] - prob.refs  # (V, N, 4)
    for i in range(4):
        if wz[i] == 0:
            continue
        q = math.sqrt(wz[i])
        idx = np.repeat(blk[:, None, :], N, axis=1).reshape(V * N, W)
        prog.add_square_objective(idx, q * S[:, :, i, :].reshape(V * N, W), q * err[:, :, i].reshape(-1))
    for i in range(2):
        if wu[i] > 0:
            q = math.sqrt(wu[i])
            prog.add_square_objective(du[:, :, i].reshape(-1, 1), q, q * U[:, :, i].reshape(-1))
    prev_idx = np.concatenate([du[:, :1], du[:, :-1]], axis=1)
    prev_val = np.concatenate([prob.u_prev[:, None], U[:, :-1]], axis=1)
    first = np.zeros((V, N), dtype=bool)
    first[:, 0] = True
    for i in range(2):
        if wdu[i] > 0:
            q = math.sqrt(wdu[i])
            idx = np.stack([du[:, :, i], prev_idx[:, :, i]], -1).reshape(-1, 2)
            coef = np.stack([np.full((V, N), q), np.where(first, 0.0, -q)], -1).reshape(-1, 2)
            prog.add_square_objective(idx, coef, q * (U[:, :, i] - prev_val[:, :, i]).reshape(-1))
    if prob.penalty is not None and np.any(prob.penalty > 0):
        vv, jj = np.nonzero(prob.penalty > 0)
        sq = np.sqrt(prob.penalty[vv, jj])
        for r in range(4):
            b = Bm[vv, jj, r, :]  # (m, 2)
            idx = np.concatenate([du[vv, jj], prev_idx[vv, jj]], axis=1)
            coef = np.concatenate([sq[:, None] * b, np.where(jj[:, None] == 0, 0.0, -sq[:, None] * b)], axis=1)
            const = sq * np.sum(b * (U[vv, jj] - prev_val[vv, jj]), axis=1)
            prog.add_square_objective(idx, coef, const)
    prog.add_linear_objective(slack, config.soft_price)

    # -- input rates (hard) -----------------------------------------------
    dprev = U - prev_val
    for i in range(2):
        idx = np.stack([du[:, :, i], prev_idx[:, :, i]], -1).reshape(-1, 2)
        coef = np.stack([np.ones((V, N)), np.where(first, 0.0, -1.0)], -1).reshape(-1, 2)
        room_up = prob.du_max[i] - dprev[:, :, i].reshape(-1)
        room_dn = prob.du_max[i] + dprev[:, :, i].reshape(-1)
        prog.add_linear(idx, coef, np.maximum(room_up, 0.0), "input-rate")
        prog.add_linear(idx, -coef, np.maximum(room_dn, 0.0), "input-rate")

    # -- state trust region (hard) ----------------------------------------
    tz = radius * np.asarray(config.state_trust, dtype=float)
    idx = np.repeat(blk[:, None, None, :], N, axis=1)
    idx = np.repeat(idx, 4, axis=2).reshape(-1, W)
    Sflat = S.reshape(-1, W)
    rhs = np.tile(tz, V * N)
    prog.add_linear(idx, Sflat, rhs, "trust")
    prog.add_linear(idx, -Sflat, rhs, "trust")

    soft_rows = []  # (idx, coef, rhs) with the slack column appended

    def soft(idx, coef, rhs):
        idx = np.atleast_2d(idx)
        coef = np.atleast_2d(coef)
        m = idx.shape[0]
        soft_rows.append((np.column_stack([idx, np.full(m, int(slack))]),
                          np.column_stack([coef, -np.ones(m)]), np.asarray(rhs, dtype=float)))

    # -- road / heading / speed bounds ------------------------------------
    for i in (1, 2, 3):
        Si = S[:, :, i, :].reshape(-1, W)
        ix = np.repeat(blk[:, None, :], N, axis=1).reshape(-1, W)
        zi = Z[:, 1:, i].reshape(-1)
        soft(ix, Si, prob.z_max[i] - zi)
        soft(ix, -Si, zi - prob.z_min[i])

    # -- disc separation between vehicles ---------------------------------
    r = disc_radius(geom, config.disc_margin)
    C, J = disc_centers(Z[:, 1:], geom)  # (V, N, 2, 2), (V, N, 2, 2, 4)
    G = np.einsum("vjsdk,vjkc->vjsdc", J, S)  # d centre / d du (own block)
    for a in range(V):
        for b in range(a + 1, V):
            diff = C[a][:, :, None, :] - C[b][:, None, :, :]  # (N, 2, 2, 2)
            dist = np.linalg.norm(diff, axis=-1)
            jj, sa, sb = np.nonzero(dist < 2 * r + config.near)
            if jj.size == 0:
                continue
            n = diff[jj, sa, sb] / np.maximum(dist[jj, sa, sb], 1e-9)[:, None]
            ga = np.einsum("md,mdc->mc", n, G[a, jj, sa])
            gb = np.einsum("md,mdc->mc", n, G[b, jj, sb])
            idx = np.concatenate([np.broadcast_to(blk[a], (jj.size, W)), np.broadcast_to(blk[b], (jj.size, W))], 1)
            soft(idx, np.concatenate([-ga, gb], 1), dist[jj, sa, sb] - 2 * r)

    # -- obstacles --------------------------------------------------------
    for box in prob.obstacles:
        q, d = box_nearest(C, box)  # (V, N, 2)
        vv, jj, ss = np.nonzero(d < r + config.near)
        if vv.size == 0:
            continue
        vec = C[vv, jj, ss] - q[vv, jj, ss]
        nrm = np.linalg.norm(vec, axis=-1)
        n = np.where(nrm[:, None] > 1e-9, vec / np.maximum(nrm, 1e-12)[:, None], 0.0)
        rhs = d[vv, jj, ss] - r
        # a centre within the box's lateral span would be pushed back through the
        # front face, i.e. braking; pass beside the box instead, on a side the road allows
        P = C[vv, jj, ss]
        span = (P[:, 1] >= box[2]) & (P[:, 1] <= box[3])
        if np.any(span):
            up_ok = box[3] + r <= prob.z_max[1]
            down_ok = box[2] - r >= prob.z_min[1]
            for m in np.nonzero(span)[0]:
                y_now = prob.z0[vv[m], 1]
                go_up = up_ok and (not down_ok or y_now >= 0.5 * (box[2] + box[3]))
                if go_up:
                    n[m], rhs[m] = (0.0, 1.0), P[m, 1] - box[3] - r
                else:
                    n[m], rhs[m] = (0.0, -1.0), box[2] - P[m, 1] - r
        g = np.einsum("md,mdc->mc", n, G[vv, jj, ss])
        soft(blk[vv], -g, rhs)

    # -- no-lane-change zone -----------------------------------------------
    if prob.zone is not None:
        Y = Z[:, :, 1]
        Sy = S[:, :, 1, :]  # dy_{j+1}
        Sy_prev = np.concatenate([np.zeros((V, 1, W)), Sy[:, :-1]], axis=1)
        inz = _zone_mask(Z[:, 1:, 0], geom, prob.zone, pad=1.0) | _zone_mask(Z[:, :-1, 0], geom, prob.zone, pad=1.0)
        vv, jj = np.nonzero(inz)
        if vv.size:
            rate = (Sy[vv, jj] - Sy_prev[vv, jj]) / prob.dt
            ydot = (Y[vv, jj + 1] - Y[vv, jj]) / prob.dt
            tol = config.zone_lateral_speed
            soft(blk[vv], rate, tol - ydot)
            soft(blk[vv], -rate, tol + ydot)
            ylat = Y[vv, jj + 1] - prob.zone_y
            soft(blk[vv], Sy[vv, jj], prob.zone_half - ylat)
            soft(blk[vv], -Sy[vv, jj], prob.zone_half + ylat)

    viol0 = 0.0
    for idx, coef, rhs in soft_rows:
        prog.add_linear(idx, coef, rhs, "soft")
        viol0 = max(viol0, float(np.max(-rhs, initial=0.0)))
    x0 = np.zeros(prog.n)
    x0[int(slack)] = viol0 + 1.0
    return prog, lin, x0


# ---------------------------------------------------------------------------
# exact evaluation
# ---------------------------------------------------------------------------

def exact_cost(prob: HorizonProblem, U, config: MpcConfig, Z=None):
    """(cost, violation) of inputs ``U`` under the nonlinear model."""
    geom = prob.geometry
    if Z is None:
        Z = rollout(prob.z0, U, geom, prob.dt, config.heading_rule)
    err = Z[:, 1:] - prob.refs
    prev = np.concatenate([prob.u_prev[:, None], U[:, :-1]], axis=1)
    cost = float(np.sum(err ** 2 * config.wz) + np.sum(U ** 2 * config.wu) + np.sum((U - prev) ** 2 * config.wdu))
    if prob.penalty is not None and np.any(prob.penalty > 0):
        V, N = prob.V, prob.N
        z_start = Z[:, :-1].reshape(-1, 4)
        pred = rollout(z_start, prev.reshape(-1, 1, 2), geom, prob.dt, config.heading_rule)[:, 1]
        gap = Z[:, 1:].reshape(-1, 4) - pred
        cost += float(np.sum(prob.penalty.reshape(-1) * np.sum(gap ** 2, axis=1)))
    viol = 0.0
    viol = max(viol, float(np.max(Z[:, 1:, 1:] - prob.z_max[1:])), float(np.max(prob.z_min[1:] - Z[:, 1:, 1:])))
    r = disc_radius(geom, config.disc_margin)
    C, _ = disc_centers(Z[:, 1:], geom)
    V = Z.shape[0]
    if V > 1:
        d = np.linalg.norm(C[:, None, :, :, None] - C[None, :, :, None, :], axis=-1)  # (V, V, N, 2, 2)
        iu = np.triu_indices(V, 1)
        viol = max(viol, float(np.max(2 * r - d[iu])))
    for box in prob.obstacles:
        _, db = box_nearest(C, box)
        viol = max(viol, float(np.max(r - db)))
    if prob.zone is not None:
        inz = _zone_mask(Z[:, 1:, 0], geom, prob.zone) | _zone_mask(Z[:, :-1, 0], geom, prob.zone)
        if np.any(inz):
            ydot = np.abs(np.diff(Z[:, :, 1], axis=1)) / prob.dt
            viol = max(viol, float(np.max(np.where(inz, ydot - config.zone_lateral_speed, -np.inf))))
            lat = np.abs(Z[:, 1:, 1] - prob.zone_y)
            viol = max(viol, float(np.max(np.where(inz, lat - prob.zone_half, -np.inf))))
    return cost, max(viol, 0.0)


def project_inputs(U, lo, hi, u_prev, du_max):
    """Project a plan onto the input box and the rate limits, step by step."""
    U = np.array(U, dtype=float)
    prev = np.asarray(u_prev, dtype=float).copy()
    # a hair inside the rate box so that the rounded difference never exceeds it
    step = np.asarray(du_max, dtype=float) * (1.0 - 1e-12)
    for j in range(U.shape[1]):
        a = np.maximum(lo[:, j], prev - step)
        b = np.minimum(hi[:, j], prev + step)
        b = np.maximum(a, b)
        U[:, j] = np.minimum(np.maximum(U[:, j], a), b)
        prev = U[:, j]
    return U


# ---------------------------------------------------------------------------
# horizon and receding loop
# ---------------------------------------------------------------------------

def solve_horizon(prob: HorizonProblem, config: MpcConfig, U_guess=None, check_collisions: bool = True,
                  solver: dict | None = None) -> HorizonResult:
    """Sequential convex programming with trust-region acceptance."""
    prob.check()
    V, N = prob.V, prob.N
    if U_guess is None:
        U_guess = np.repeat(prob.u_prev[:, None], N, axis=1)
    U = project_inputs(U_guess, prob.lo, prob.hi, prob.u_prev, prob.du_max)
    cost, viol = exact_cost(prob, U, config)
    merit = cost + config.soft_price * viol
    merits = [merit]
    radius = 1.0
    status = "iteration-limit"
    lin = None
    it = 0
    for it in range(1, config.max_inner_iters + 1):
        prog, lin, x0 = build_horizon_program(prob, config, U, radius, lin)
        sol = prog.solve(x0=x0, **(solver or {}))
        if sol.status not in ("optimal", "iteration-limit"):
            radius *= 0.5
            continue
        dU = sol.x[: V * N * 2].reshape(V, N, 2)
        U_new = project_inputs(U + dU, prob.lo, prob.hi, prob.u_prev, prob.du_max)
        Z_new = rollout(prob.z0, U_new, prob.geometry, prob.dt, config.heading_rule)
        c_new, v_new = exact_cost(prob, U_new, config, Z_new)
        m_new = c_new + config.soft_price * v_new
        if m_new <= merit + 1e-12 * (1.0 + abs(merit)):
            change = merit - m_new
            U, merit, cost, viol = U_new, m_new, c_new, v_new
            merits.append(merit)
            lin = None
            if change < config.tol * (1.0 + abs(merit)):
                status = "converged"
                break
        else:
            radius *= 0.5
            if radius < 1e-4:
                status = "converged"
                break
    if status == "iteration-limit":
        warnings.warn(f"horizon solve stopped after {it} iterations", RuntimeWarning, stacklevel=2)
    Z = rollout(prob.z0, U, prob.geometry, prob.dt, config.heading_rule)
    if check_collisions:
        for j in range(1, N + 1):
            if any_collision(Z[:, j], prob.geometry, prob.obstacles):
                raise CollisionError(f"planned trajectory collides at horizon step {j}")
    return HorizonResult(U[:, 0].copy(), U, Z, merit, cost, viol, status, it, merits)


def estimation_gaps(states, inputs, geom: VehicleGeometry, dt: float, heading_rule: str = "kinematic"):
    """||z(t) - z_pred(t)|| where z_pred(t) advances z(t-1) with the input of step t-2.

    Shape (V, T+1); the first two entries are zero.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    V, T = inputs.shape[0], inputs.shape[1]
    out = np.zeros((V, T + 1))
    if T < 2:
        return out
    z_start = states[:, 1:T].reshape(-1, 4)
    held = inputs[:, : T - 1].reshape(-1, 1, 2)
    pred = rollout(z_start, held, geom, dt, heading_rule)[:, 1].reshape(V, T - 1, 4)
    out[:, 2:] = np.linalg.norm(states[:, 2:] - pred, axis=-1)
    return out


def follower_distances(states) -> np.ndarray:
    """(V, T+1) distance of each vehicle to the lead vehicle (zero for the lead)."""
    states = np.asarray(states, dtype=float)
    return np.linalg.norm(states[:, :, :2] - states[:1, :, :2], axis=-1)


def horizon_problem(scenario: Scenario, z, u_prev, t0: int, N: int,
                    penalty: CsitPenalty | None = None, Q_h: float = 0.0, guess_states=None) -> HorizonProblem:
    T = scenario.T
    ref_idx = np.minimum(np.arange(t0 + 1, t0 + N + 1), T)
    refs = scenario.references[:, ref_idx]
    lo = np.empty((scenario.V, N, 2))
    hi = np.empty((scenario.V, N, 2))
    for j in range(N):
        lo[:, j], hi[:, j] = scenario.input_bounds(t0 + j)
    weights = None
    if penalty is not None and Q_h > 0:
        gs = guess_states if guess_states is not None else refs
        dist = np.linalg.norm(gs[:, :, :2] - gs[:1, :, :2], axis=-1)
        weights = penalty.weights(dist, np.minimum(ref_idx, T - 1), Q_h, float(np.linalg.norm(scenario.z_max)))
        weights[0] = 0.0
    half = scenario.lane_width / 2 - scenario.geometry.width / 2
    return HorizonProblem(np.asarray(z, dtype=float), refs, np.asarray(u_prev, dtype=float), lo, hi,
                          scenario.du_max, scenario.z_min, scenario.z_max, list(scenario.obstacles),
                          scenario.no_change_zone, scenario.target_y, half, weights,
                          scenario.geometry, scenario.dt)


def receding_run(scenario: Scenario, config: MpcConfig | None = None, T: int | None = None,
                 penalty: CsitPenalty | None = None, solver: dict | None = None) -> PlatoonTrace:
    """Closed-loop run: re-plan every step, apply the first input, hold it for the tail."""
    config = config or MpcConfig()
    T = scenario.T if T is None else int(T)
    if T > scenario.T:
        raise InvalidConfigError(f"run length {T} exceeds the scenario length {scenario.T}")
    N = config.horizon
    V = scenario.V
    geom = scenario.geometry
    states = np.zeros((V, T + 1, 4))
    states[:, 0] = scenario.initial_states
    inputs = np.zeros((V, T, 2))
    u_prev = np.zeros((V, 2))
    guess = None
    objectives, statuses, inner = [], [], []
    planned = max(T - N, 1)
    for t in range(T):
        if t < planned:
            gstates = None
            if guess is not None:
                gstates = rollout(states[:, t], guess, geom, scenario.dt, config.heading_rule)[:, 1:]
            prob = horizon_problem(scenario, states[:, t], u_prev, t, N, penalty, config.Q_h, gstates)
            try:
                res = solve_horizon(prob, config, guess, solver=solver)
            except PlatoonError as exc:
                exc.step = t
                exc.args = (f"step {t}: {exc}",) + exc.args[1:]
                raise
            u = res.u_first
            guess = np.concatenate([res.inputs[:, 1:], res.inputs[:, -1:]], axis=1)
            objectives.append(res.merit)
            statuses.append(res.status)
            inner.append(res.iterations)
        else:
            lo, hi = scenario.input_bounds(t)
            u = project_inputs(u_prev[:, None], lo[:, None], hi[:, None], u_prev, scenario.du_max)[:, 0]
        inputs[:, t] = u
        states[:, t + 1] = rollout(states[:, t], u[:, None], geom, scenario.dt, config.heading_rule)[:, 1]
        u_prev = u
    flags = np.array([any_collision(states[:, t], geom, scenario.obstacles) for t in range(T + 1)])
    clearance = np.array([min_clearance(states[:, t], geom) for t in range(T + 1)])
    return PlatoonTrace(states, inputs, objectives, flags, statuses, inner, clearance, scenario.dt)


def control_cost(trace: PlatoonTrace, scenario: Scenario, config: MpcConfig) -> float:
    """Tracking, effort and input-rate terms over the whole run."""
    T = trace.T
    err = trace.states[:, 1:T + 1] - scenario.references[:, 1:T + 1]
    prev = np.concatenate([np.zeros((trace.inputs.shape[0], 1, 2)), trace.inputs[:, :-1]], axis=1)
    return float(np.sum(err ** 2 * config.wz) + np.sum(trace.inputs ** 2 * config.wu)
                 + np.sum((trace.inputs - prev) ** 2 * config.wdu))
