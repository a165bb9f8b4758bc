"""Downlink latency subproblem: SCA over the rate-split precoding program.

Internal units
--------------
* rates are spectral efficiencies in bit/s/Hz (multiply by ``B`` for bit/s)
* precoders are normalised by ``sqrt(P_t)`` so the per-slot power budget is 1
* channels are the CSIT estimates scaled by ``sqrt(P_t) / sigma``, so noise is 1
  and the interference-plus-noise auxiliaries are in units of the noise power
* the payload is ``B0 / (dt * B)`` bit/s/Hz-slots
* the latency bound is a slot index (slots are numbered 1..T)

Schemes
-------
``rsma``  common stream carries the payload and optional common parts of the
          control messages; private streams carry the rest.
``mulp``  as ``rsma`` with the common parts of the control messages removed.
``noma``  no common stream; every follower receives the payload on its own
          stream, decoded with SIC in descending channel-norm order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import PrecoderMatrix, RadioConfig
from .convex import ConvexProgram, Solution
from .errors import (ConsistencyError, InvalidConfigError, InvalidLinearizationError,
                     PayloadInfeasibleError, QosInfeasibleError)

SCHEMES = ("rsma", "mulp", "noma")


@dataclass
class DownlinkSpec:
    """Inputs of one downlink subproblem.

    ``channels`` is (K, T, M) complex (true channels), ``epsilons`` is (K, T).
    """

    channels: np.ndarray
    epsilons: np.ndarray
    radio: RadioConfig = field(default_factory=RadioConfig)
    dt: float = 0.05
    B0: float = 1e8
    R_th: float = 0.5e6
    Q_t: float = 1.0
    Q_h: float = 100.0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=complex)
        if self.channels.ndim == 2:
            self.channels = self.channels[:, :, None]
        self.epsilons = np.broadcast_to(np.asarray(self.epsilons, dtype=float), self.channels.shape[:2]).copy()
        K, T, M = self.channels.shape
        if T < 1:
            raise InvalidConfigError("need at least one slot")
        if K != self.radio.K or M != self.radio.M:
            raise InvalidConfigError(f"channels shaped K={K}, M={M} but radio has K={self.radio.K}, M={self.radio.M}")
        if not self.B0 > 0:
            raise InvalidConfigError(f"payload must be positive, got {self.B0}")
        if self.R_th < 0:
            raise InvalidConfigError(f"QoS threshold must be nonnegative, got {self.R_th}")
        if self.Q_t < 0 or self.Q_h < 0:
            raise InvalidConfigError("weights must be nonnegative")
        if np.any((self.epsilons < 0) | (self.epsilons > 1)):
            raise InvalidConfigError("epsilons must lie in [0, 1]")
        if not np.all(np.isfinite(self.channels)):
            raise InvalidConfigError("channels must be finite")

    @property
    def K(self) -> int:
        return self.channels.shape[0]

    @property
    def T(self) -> int:
        return self.channels.shape[1]

    @property
    def M(self) -> int:
        return self.channels.shape[2]

    @property
    def payload(self) -> float:
        return self.B0 / (self.dt * self.radio.B)

    @property
    def r_th(self) -> float:
        return self.R_th / self.radio.B

    def scaled_channels(self) -> np.ndarray:
        """Normalised CSIT estimates, shape (T, K, M)."""
        est = np.sqrt(1.0 - self.epsilons ** 2)[:, :, None] * self.channels
        g = est * math.sqrt(self.radio.P_t / self.radio.noise)
        return np.ascontiguousarray(np.transpose(g, (1, 0, 2)))

    def penalty_weights(self) -> np.ndarray:
        """(T, K) weights w with penalty Q_h * sum w * ||p_bar||^4."""
        hn = np.sum(np.abs(self.channels) ** 2, axis=2)  # (K, T)
        return (self.Q_h * self.epsilons ** 2 * hn * self.radio.P_t ** 2).T

    def with_power(self, power_dbm: float) -> "DownlinkSpec":
        return replace(self, radio=RadioConfig.from_dbm(power_dbm, M=self.radio.M, K=self.radio.K,
                                                        B=self.radio.B, noise_density=self.radio.noise_density,
                                                        mu=self.radio.mu))


@dataclass
class DownlinkVariables:
    """Variables of the downlink program in internal units (see module doc).

    ``pc`` (T, M) and ``pp`` (T, K, M) are normalised complex precoders.  For
    ``noma`` the schedule, payload rate and omega are per follower (T, K) and
    ``C0`` is all zero.
    """

    scheme: str
    psi: np.ndarray
    C0: np.ndarray
    C: np.ndarray
    omega: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    alpha_c: np.ndarray
    theta_c: np.ndarray
    xi_c: np.ndarray
    pc: np.ndarray
    pp: np.ndarray
    s: np.ndarray
    latency_bound: float
    q: np.ndarray | None = None

    def copy(self) -> "DownlinkVariables":
        return DownlinkVariables(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                                    for k, v in self.__dict__.items()})

    @property
    def T(self) -> int:
        return self.pc.shape[0]

    def precoder(self, spec: DownlinkSpec, t: int) -> PrecoderMatrix:
        """Physical precoder of slot ``t`` (0-based)."""
        sc = math.sqrt(spec.radio.P_t)
        return PrecoderMatrix(sc * self.pc[t], sc * self.pp[t].T)

    def active(self) -> np.ndarray:
        """Boolean slot mask (any follower for noma)."""
        psi = self.psi if self.psi.ndim == 1 else self.psi.max(axis=1)
        return psi >= 0.5

    def latency_index(self) -> int:
        idx = np.nonzero(self.active())[0]
        return int(idx[-1] + 1) if idx.size else 0


@dataclass
class ScaReport:
    scheme: str
    iterates: list
    status: str
    final: DownlinkVariables
    relaxed: DownlinkVariables
    latency_index: int
    latency_s: float
    objective: float
    trace: list = field(default_factory=list)
    delivered: np.ndarray | None = None


# ---------------------------------------------------------------------------
# minorants
# ---------------------------------------------------------------------------

def minorant_bilinear(psi_n: float, C0_n: float):
    """Tangent plane of psi*C0 at (psi_n, C0_n) as a callable (psi, C0) -> value.

    The callable exposes ``coef`` = (d/dpsi, d/dC0) and ``const``.
    """
    def omega(psi, C0):
        return psi_n * C0 + C0_n * psi - psi_n * C0_n
    omega.coef = (C0_n, psi_n)
    omega.const = -psi_n * C0_n
    return omega


def minorant_bilinear_dc(psi_n: float, C0_n: float):
    """Concave global lower bound of psi*C0, tight at (psi_n, C0_n).

    With u = l*psi + C0/l and v = l*psi - C0/l, psi*C0 = (u^2 - v^2)/4; the
    convex u^2 is replaced by its tangent at u_n.  ``l`` balances the two
    factors at the expansion point.
    """
    lam = _balance(psi_n, C0_n)
    u_n = lam * psi_n + C0_n / lam

    def omega(psi, C0):
        u = lam * psi + C0 / lam
        v = lam * psi - C0 / lam
        return (2.0 * u_n * u - u_n ** 2 - v ** 2) / 4.0
    omega.scale = lam
    omega.u_n = u_n
    return omega


def _balance(psi_n, C0_n):
    return np.sqrt((np.asarray(C0_n, dtype=float) + 1e-3) / (np.asarray(psi_n, dtype=float) + 1e-3))


def _schedule_constraint(prog, om, ps, rt, psn, rn, form):
    """omega <= minorant of psi * rate, elementwise over flattened index arrays."""
    om, ps, rt = (np.asarray(a).reshape(-1) for a in (om, ps, rt))
    psn, rn = np.asarray(psn, dtype=float).reshape(-1), np.asarray(rn, dtype=float).reshape(-1)
    if form == "tangent":
        prog.add_linear(np.column_stack([om, ps, rt]), np.column_stack([np.ones(om.size), -rn, -psn]),
                        -psn * rn, "schedule-minorant")
        return
    lam = _balance(psn, rn)
    u_n = lam * psn + rn / lam
    prog.add_quadratic(np.column_stack([ps, rt])[:, None, :],
                       np.column_stack([lam / 2.0, -0.5 / lam])[:, None, :], 0.0,
                       np.column_stack([ps, rt, om]),
                       np.column_stack([u_n * lam / 2.0, u_n / (2.0 * lam), -np.ones(om.size)]),
                       -u_n ** 2 / 4.0, "schedule-minorant")


def _re_im_rows(g):
    """Coefficient rows over interleaved [re, im] of p for Re(g^H p), Im(g^H p)."""
    g = np.asarray(g, dtype=complex)
    M = g.shape[-1]
    re = np.empty(g.shape[:-1] + (2 * M,))
    im = np.empty_like(re)
    re[..., 0::2] = g.real
    re[..., 1::2] = g.imag
    im[..., 0::2] = -g.imag
    im[..., 1::2] = g.real
    return re, im


def to_real(p) -> np.ndarray:
    p = np.asarray(p, dtype=complex)
    out = np.empty(p.shape[:-1] + (2 * p.shape[-1],))
    out[..., 0::2] = p.real
    out[..., 1::2] = p.imag
    return out


def to_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., 0::2] + 1j * x[..., 1::2]


def minorant_qol(p_n, xi_n: float, h):
    """Affine lower bound of |h^H p|^2 / xi tangent at (p_n, xi_n).

    Returns a callable (p, xi) -> value with attributes ``coef_p`` (real row
    over interleaved p), ``coef_xi`` and ``grad_complex`` (d/d conj(p)).
    """
    if not xi_n > 0:
        raise InvalidLinearizationError(f"expansion point needs xi > 0, got {xi_n}")
    h = np.asarray(h, dtype=complex)
    p_n = np.asarray(p_n, dtype=complex)
    a = np.vdot(h, p_n)
    re, im = _re_im_rows(h)
    coef_p = 2.0 / xi_n * (a.real * re + a.imag * im)
    coef_xi = -(abs(a) / xi_n) ** 2

    def psi(p, xi):
        return 2.0 * float(np.real(np.conj(a) * np.vdot(h, np.asarray(p, dtype=complex)))) / xi_n + coef_xi * xi
    psi.coef_p = coef_p
    psi.coef_xi = coef_xi
    return psi


# ---------------------------------------------------------------------------
# exact evaluation helpers
# ---------------------------------------------------------------------------

def _gains(G, pc, pp):
    """|g_k^H p_c|^2 (T, K) and |g_k^H p_i|^2 (T, K, K)."""
    gc = np.abs(np.einsum("tkm,tm->tk", G.conj(), pc)) ** 2
    gp = np.abs(np.einsum("tkm,tim->tki", G.conj(), pp)) ** 2
    return gc, gp


def sic_order(spec: DownlinkSpec) -> np.ndarray:
    """(T, K) position of each follower in the SIC order (0 = strongest)."""
    norms = np.sum(np.abs(spec.channels) ** 2, axis=2).T  # (T, K)
    order = np.argsort(-norms, axis=1, kind="stable")
    pos = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    pos[rows, order] = np.arange(order.shape[1])[None, :]
    return pos


def exact_rates(spec: DownlinkSpec, pc, pp, scheme: str = "rsma"):
    """Exact common rates (T, K) and private rates (T, K) in bit/s/Hz."""
    G = spec.scaled_channels()
    gc, gp = _gains(G, pc, pp)
    diag = np.einsum("tkk->tk", gp)
    if scheme == "noma":
        pos = sic_order(spec)
        # interference from streams of followers earlier (stronger) in the order
        stronger = pos[:, None, :] < pos[:, :, None]  # [t, k, i]: i stronger than k
        interf = np.sum(gp * stronger, axis=2)
        return np.zeros_like(diag), np.log2(1.0 + diag / (interf + 1.0))
    tot = gp.sum(axis=2)
    Rc = np.log2(1.0 + gc / (tot + 1.0))
    Rp = np.log2(1.0 + diag / (tot - diag + 1.0))
    return Rc, Rp


def penalty(spec: DownlinkSpec, pp) -> float:
    pw = np.sum(np.abs(pp) ** 2, axis=2)
    return float(np.sum(spec.penalty_weights() * pw ** 2))


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _directions(G):
    """Common beam direction and matched private beam directions per slot."""
    nrm = np.linalg.norm(G, axis=2, keepdims=True)
    nrm[nrm == 0] = 1.0
    U = G / nrm
    u = U.sum(axis=1)
    un = np.linalg.norm(u, axis=1, keepdims=True)
    bad = un[:, 0] < 1e-12
    un[bad] = 1.0
    u = u / un
    u[bad] = 0.0
    u[bad, 0] = 1.0
    return u, U


def init_feasible(spec: DownlinkSpec, scheme: str = "rsma") -> DownlinkVariables:
    """Feasible starting point: precoders meet the power budget and QoS.

    Rates are set from the precoders with C0 equal to the common rate and no
    common parts for the control messages.
    """
    if scheme not in SCHEMES:
        raise InvalidConfigError(f"unknown scheme {scheme!r}")
    G = spec.scaled_channels()
    T, K, M = G.shape
    u, U = _directions(G)
    r_th = spec.r_th
    fracs = np.concatenate([[0.0], np.logspace(-9, 0, 91)])
    pc = np.zeros((T, M), dtype=complex)
    pp = np.zeros((T, K, M), dtype=complex)
    if scheme == "noma":
        pos = sic_order(spec)
        ratios = np.linspace(0.0, 6.0, 61)
    for t in range(T):
        best, best_val = None, -np.inf
        cands = []
        if scheme == "noma":
            for r in ratios:
                w = np.exp(r * pos[t])
                w = w / w.sum()
                for beams in (np.repeat(u[t][None], K, 0), U[t]):
                    cands.append((np.zeros(M), np.sqrt(w)[:, None] * beams))
        else:
            for rho in fracs:
                for beams in (np.repeat(u[t][None], K, 0), U[t]):
                    cands.append((math.sqrt(1.0 - rho) * u[t], math.sqrt(rho / K) * beams))
        for c, P in cands:
            gc = np.abs(G[t].conj() @ c) ** 2
            gp = np.abs(G[t].conj() @ P.T) ** 2  # [k, i]
            diag = np.diag(gp)
            if scheme == "noma":
                stronger = pos[t][None, :] < pos[t][:, None]
                rp = np.log2(1.0 + diag / (np.sum(gp * stronger, axis=1) + 1.0))
                ok = np.all(rp >= r_th * (1 + 1e-9) + 1e-12)
                val = float(np.min(rp - r_th))
            else:
                tot = gp.sum(axis=1)
                rp = np.log2(1.0 + diag / (tot - diag + 1.0))
                rc = float(np.min(np.log2(1.0 + gc / (tot + 1.0))))
                ok = np.all(rp >= r_th * (1 + 1e-9) + 1e-12)
                val = rc
            if ok and val > best_val:
                best, best_val = (c, P), val
        if best is None:
            raise QosInfeasibleError(t + 1)
        # keep a sliver of the power budget free so the start is interior
        pc[t] = best[0] * math.sqrt(0.999)
        pp[t] = best[1] * math.sqrt(0.999)
    return _complete(spec, scheme, pc, pp)


def _complete(spec: DownlinkSpec, scheme: str, pc, pp) -> DownlinkVariables:
    """Fill auxiliaries from precoders using the equality versions of the constraints."""
    G = spec.scaled_channels()
    T, K, _ = G.shape
    gc, gp = _gains(G, pc, pp)
    diag = np.einsum("tkk->tk", gp)
    if scheme == "noma":
        pos = sic_order(spec)
        stronger = pos[:, None, :] < pos[:, :, None]
        xi = np.sum(gp * stronger, axis=2) + 1.0
        xi_c = np.ones((T, K))
        theta_c = np.ones((T, K))
    else:
        tot = gp.sum(axis=2)
        xi = tot - diag + 1.0
        xi_c = tot + 1.0
        theta_c = 1.0 + (1.0 - 1e-12) * gc / xi_c
    # the 1e-12 margin keeps the start strictly inside the signal constraints despite round-off
    theta = 1.0 + (1.0 - 1e-12) * diag / xi
    alpha = np.log2(theta)
    alpha_c = np.log2(theta_c)
    if scheme == "noma":
        q = np.maximum(alpha - spec.r_th, 0.0)
        psi = np.ones((T, K))
        omega = psi * q
        C0 = np.zeros(T)
    else:
        q = None
        C0 = alpha_c.min(axis=1)
        psi = np.ones(T)
        omega = psi * C0
    s = np.sum(np.abs(pp) ** 2, axis=2)
    return DownlinkVariables(scheme=scheme, psi=psi, C0=C0, C=np.zeros((T, K)), omega=omega,
                             alpha=alpha, theta=theta, xi=xi, alpha_c=alpha_c, theta_c=theta_c,
                             xi_c=xi_c, pc=pc.copy(), pp=pp.copy(), s=s, latency_bound=float(T), q=q)


# ---------------------------------------------------------------------------
# subproblem
# ---------------------------------------------------------------------------

@dataclass
class _Layout:
    prog: ConvexProgram
    idx: dict


BILINEAR_FORMS = ("dc", "tangent")


def build_subproblem(spec: DownlinkSpec, current: DownlinkVariables, scheme: str | None = None,
                     bilinear: str = "dc") -> _Layout:
    """Convex approximation of the downlink program around ``current``.

    ``bilinear`` selects how omega <= psi * C0 is approximated: ``"dc"`` uses
    the concave lower bound of :func:`minorant_bilinear_dc` (iterates stay
    feasible, so the objective cannot increase); ``"tangent"`` uses the plain
    tangent plane of :func:`minorant_bilinear`, which can overestimate.
    """
    if bilinear not in BILINEAR_FORMS:
        raise InvalidConfigError(f"unknown bilinear form {bilinear!r}")
    scheme = scheme or current.scheme
    if scheme not in SCHEMES:
        raise InvalidConfigError(f"unknown scheme {scheme!r}")
    G = spec.scaled_channels()
    T, K, M = G.shape
    cur = current
    for name in ("xi", "xi_c"):
        v = getattr(cur, name)
        if v.shape != (T, K) or not np.all(np.isfinite(v)):
            raise InvalidLinearizationError(f"current point has malformed {name}")
    if np.any(cur.xi <= 0) or (scheme != "noma" and np.any(cur.xi_c <= 0)):
        raise InvalidLinearizationError("expansion point needs positive interference auxiliaries")
    if cur.pc.shape != (T, M) or cur.pp.shape != (T, K, M):
        raise InvalidLinearizationError("current precoders have the wrong shape")

    prog = ConvexProgram()
    tvec = np.arange(1, T + 1, dtype=float)
    xi_hi = 2.0 * (np.sum(np.abs(G) ** 2, axis=2) + 1.0)
    idx = {}
    noma = scheme == "noma"
    shapeT = (T, K) if noma else (T,)
    idx["phi"] = prog.add_variable("phi", (), lb=0.0, ub=T + 1.0)
    idx["psi"] = prog.add_variable("psi", shapeT, lb=0.0, ub=1.0)
    if noma:
        idx["q"] = prog.add_variable("q", (T, K), lb=0.0)
    else:
        idx["C0"] = prog.add_variable("C0", (T,), lb=0.0)
    if scheme == "rsma":
        idx["C"] = prog.add_variable("C", (T, K), lb=0.0)
    idx["omega"] = prog.add_variable("omega", shapeT)
    idx["alpha"] = prog.add_variable("alpha", (T, K))
    idx["theta"] = prog.add_variable("theta", (T, K))
    idx["xi"] = prog.add_variable("xi", (T, K), ub=xi_hi)
    if not noma:
        idx["alpha_c"] = prog.add_variable("alpha_c", (T, K))
        idx["theta_c"] = prog.add_variable("theta_c", (T, K))
        idx["xi_c"] = prog.add_variable("xi_c", (T, K), ub=xi_hi)
        idx["pc"] = prog.add_variable("pc", (T, 2 * M))
    idx["pp"] = prog.add_variable("pp", (T, K, 2 * M))
    idx["s"] = prog.add_variable("s", (T, K), lb=0.0, ub=1.5)

    # objective: Q_t * phi + sum w * s^2
    prog.add_linear_objective(idx["phi"], spec.Q_t)
    w = spec.penalty_weights()
    if np.any(w > 0):
        prog.add_square_objective(idx["s"].reshape(-1, 1), 1.0, 0.0, w.reshape(-1))

    phi = int(idx["phi"])
    # latency bound: t * psi(t) <= phi
    if noma:
        pi = idx["psi"].reshape(-1)
        tt = np.repeat(tvec, K)
        prog.add_linear(np.column_stack([pi, np.full(pi.size, phi)]),
                        np.column_stack([tt, -np.ones(pi.size)]), 0.0, "latency-bound")
        # payload per follower: -sum_t omega_k(t) <= -payload
        prog.add_linear(idx["omega"].T, -1.0, -spec.payload, "payload")
        # omega <= tangent of psi * q
        qn = cur.q if cur.q is not None else np.maximum(cur.alpha - spec.r_th, 0.0)
        _schedule_constraint(prog, idx["omega"], idx["psi"], idx["q"], cur.psi, qn, bilinear)
        # QoS plus payload on the private rate: q + r_th <= alpha
        prog.add_linear(np.stack([idx["q"], idx["alpha"]], -1).reshape(-1, 2), [1.0, -1.0],
                        -spec.r_th, "qos")
    else:
        prog.add_linear(np.column_stack([idx["psi"], np.full(T, phi)]),
                        np.column_stack([tvec, -np.ones(T)]), 0.0, "latency-bound")
        prog.add_linear(idx["omega"][None, :], -1.0, -spec.payload, "payload")
        _schedule_constraint(prog, idx["omega"], idx["psi"], idx["C0"], cur.psi, cur.C0, bilinear)
        if scheme == "rsma":
            prog.add_linear(np.stack([idx["C"], idx["alpha"]], -1).reshape(-1, 2), [-1.0, -1.0],
                            -spec.r_th, "qos")
        else:
            prog.add_linear(idx["alpha"].reshape(-1, 1), -1.0, -spec.r_th, "qos")

    # private rate cone
    prog.add_power_cone(idx["alpha"].reshape(-1), idx["theta"].reshape(-1), "private-cone")
    if not noma:
        prog.add_power_cone(idx["alpha_c"].reshape(-1), idx["theta_c"].reshape(-1), "common-cone")

    re, im = _re_im_rows(G)  # (T, K, 2M)
    # private signal tangent: theta - 1 <= Psi(p_k, xi_k)
    a = np.einsum("tkm,tkm->tk", G.conj(), cur.pp)
    cp_ = 2.0 / cur.xi[..., None] * (a.real[..., None] * re + a.imag[..., None] * im)
    cxi = (np.abs(a) / cur.xi) ** 2
    rows_idx = np.concatenate([idx["theta"][..., None], idx["xi"][..., None], idx["pp"]], axis=2)
    rows_cf = np.concatenate([np.ones((T, K, 1)), cxi[..., None], -cp_], axis=2)
    prog.add_linear(rows_idx.reshape(T * K, -1), rows_cf.reshape(T * K, -1), 1.0, "private-signal-tangent")
    if not noma:
        ac = np.einsum("tkm,tm->tk", G.conj(), cur.pc)
        cpc = 2.0 / cur.xi_c[..., None] * (ac.real[..., None] * re + ac.imag[..., None] * im)
        cxic = (np.abs(ac) / cur.xi_c) ** 2
        pcb = np.broadcast_to(idx["pc"][:, None, :], (T, K, 2 * M))
        rows_idx = np.concatenate([idx["theta_c"][..., None], idx["xi_c"][..., None], pcb], axis=2)
        rows_cf = np.concatenate([np.ones((T, K, 1)), cxic[..., None], -cpc], axis=2)
        prog.add_linear(rows_idx.reshape(T * K, -1), rows_cf.reshape(T * K, -1), 1.0, "common-signal-tangent")

    # interference epigraphs
    reim = np.stack([re, im], axis=2)  # (T, K, 2, 2M)
    if noma:
        pos = sic_order(spec)
        for t in range(T):
            for k in range(K):
                strong = [i for i in range(K) if pos[t, i] < pos[t, k]]
                _interference(prog, idx["pp"][t], reim[t, k], strong, idx["xi"][t, k], "private-interference")
    else:
        for k in range(K):
            others = [i for i in range(K) if i != k]
            if others:
                ri = np.stack([np.stack([idx["pp"][:, i]] * 2, axis=1) for i in others], axis=1)  # (T, K-1, 2, 2M)
                rc = np.broadcast_to(reim[:, k][:, None], ri.shape)
                prog.add_quadratic(ri.reshape(T, -1, 2 * M), rc.reshape(T, -1, 2 * M), 0.0,
                                   idx["xi"][:, k][:, None], 1.0, -1.0, "private-interference")
            else:
                prog.add_linear(idx["xi"][:, k][:, None], -1.0, -1.0, "private-interference")
        ri = np.stack([np.stack([idx["pp"][:, i]] * 2, axis=1) for i in range(K)], axis=1)  # (T, K, 2, 2M)
        for k in range(K):
            rc = np.broadcast_to(reim[:, k][:, None], ri.shape)
            prog.add_quadratic(ri.reshape(T, -1, 2 * M), rc.reshape(T, -1, 2 * M), 0.0,
                               idx["xi_c"][:, k][:, None], 1.0, -1.0, "common-interference")
        # common rate shared by the payload and the common control parts
        if scheme == "rsma":
            cols = np.concatenate([np.repeat(idx["C0"][:, None, None], K, 1),
                                   np.repeat(idx["C"][:, None, :], K, 1),
                                   idx["alpha_c"][..., None]], axis=2)
            cf = np.concatenate([np.ones((T, K, 1)), np.ones((T, K, K)), -np.ones((T, K, 1))], axis=2)
        else:
            cols = np.stack([np.repeat(idx["C0"][:, None], K, 1), idx["alpha_c"]], axis=2)
            cf = np.stack([np.ones((T, K)), -np.ones((T, K))], axis=2)
        prog.add_linear(cols.reshape(T * K, -1), cf.reshape(T * K, -1), 0.0, "common-rate")

    # power budget and penalty epigraph
    allp = idx["pp"].reshape(T, -1) if noma else np.concatenate([idx["pc"], idx["pp"].reshape(T, -1)], axis=1)
    prog.add_quadratic(allp[..., None], 1.0, 0.0, np.zeros((T, 0), dtype=np.int64), np.zeros((T, 0)), 1.0,
                       "power")
    prog.add_quadratic(idx["pp"].reshape(T * K, 2 * M, 1), 1.0, 0.0, idx["s"].reshape(-1, 1), 1.0, 0.0,
                       "penalty-epigraph")
    return _Layout(prog, idx)


def _interference(prog, pp_t, reim_k, strong, xi_idx, label):
    if not strong:
        prog.add_linear(np.array([[xi_idx]]), -1.0, -1.0, label)
        return
    ri = np.stack([np.stack([pp_t[i]] * 2, axis=0) for i in strong], axis=0).reshape(-1, pp_t.shape[1])
    rc = np.broadcast_to(reim_k[None], (len(strong), 2, pp_t.shape[1])).reshape(-1, pp_t.shape[1])
    prog.add_quadratic(ri[None], rc[None], 0.0, np.array([[xi_idx]]), 1.0, -1.0, label)


def _pack(layout: _Layout, v: DownlinkVariables) -> np.ndarray:
    prog, idx = layout.prog, layout.idx
    x = np.zeros(prog.n)
    x[idx["phi"]] = v.latency_bound
    x[idx["psi"]] = v.psi
    x[idx["omega"]] = v.omega
    x[idx["alpha"]] = v.alpha
    x[idx["theta"]] = v.theta
    x[idx["xi"]] = v.xi
    x[idx["pp"]] = to_real(v.pp)
    x[idx["s"]] = v.s
    if "C0" in idx:
        x[idx["C0"]] = v.C0
    if "C" in idx:
        x[idx["C"]] = v.C
    if "q" in idx:
        x[idx["q"]] = v.q
    if "pc" in idx:
        x[idx["pc"]] = to_real(v.pc)
        x[idx["alpha_c"]] = v.alpha_c
        x[idx["theta_c"]] = v.theta_c
        x[idx["xi_c"]] = v.xi_c
    return x


def _unpack(layout: _Layout, x, scheme: str, T: int, K: int, M: int) -> DownlinkVariables:
    idx = layout.idx
    g = lambda k: np.asarray(x[idx[k]], dtype=float)  # noqa: E731
    noma = scheme == "noma"
    return DownlinkVariables(
        scheme=scheme, psi=g("psi"),
        C0=np.zeros(T) if noma else g("C0"),
        C=g("C") if "C" in idx else np.zeros((T, K)),
        omega=g("omega"), alpha=g("alpha"), theta=g("theta"), xi=g("xi"),
        alpha_c=np.zeros((T, K)) if noma else g("alpha_c"),
        theta_c=np.ones((T, K)) if noma else g("theta_c"),
        xi_c=np.ones((T, K)) if noma else g("xi_c"),
        pc=np.zeros((T, M), dtype=complex) if noma else to_complex(g("pc")),
        pp=to_complex(g("pp")), s=g("s"), latency_bound=float(x[idx["phi"]]),
        q=g("q") if noma else None)


def objective_value(spec: DownlinkSpec, v: DownlinkVariables) -> float:
    """Exact objective Q_t * latency_bound + Q_h * penalty (penalty from the precoders)."""
    return spec.Q_t * v.latency_bound + penalty(spec, v.pp)


def original_violation(spec: DownlinkSpec, v: DownlinkVariables) -> float:
    """Largest violation of the exact signal constraints |g^H p|^2 / xi >= theta - 1.

    Measured relative to max(1, theta).
    """
    G = spec.scaled_channels()
    gc, gp = _gains(G, v.pc, v.pp)
    diag = np.einsum("tkk->tk", gp)
    viol = (v.theta - 1.0 - diag / v.xi) / np.maximum(1.0, v.theta)
    if v.scheme != "noma":
        viol = np.maximum(viol, (v.theta_c - 1.0 - gc / v.xi_c) / np.maximum(1.0, v.theta_c))
    return float(max(0.0, viol.max()))


# ---------------------------------------------------------------------------
# rounding and delivery
# ---------------------------------------------------------------------------

def deliverable_rates(spec: DownlinkSpec, v: DownlinkVariables) -> np.ndarray:
    """Exact payload rate per slot (T,) or per slot and follower (T, K) for noma."""
    Rc, Rp = exact_rates(spec, v.pc, v.pp, v.scheme)
    if v.scheme == "noma":
        return np.maximum(Rp - spec.r_th, 0.0)
    # common parts of the control messages come out of the common rate first
    return np.maximum(Rc.min(axis=1) - v.C.sum(axis=1), 0.0)


def round_schedule(v: DownlinkVariables, rates=None, payload: float | None = None) -> DownlinkVariables:
    """Binary schedule from a relaxed one.

    Slots with psi >= 0.5 are switched on; if the payload is short, further
    slots are switched on in increasing order; then trailing active slots that
    are not needed are switched off.  ``rates`` defaults to ``v.C0`` (``v.q``
    for noma) and ``payload`` to the sum delivered by the relaxed schedule.
    """
    out = v.copy()
    psi = np.asarray(v.psi, dtype=float)
    per_user = psi.ndim == 2
    R = np.asarray(rates if rates is not None else (v.q if per_user else v.C0), dtype=float)
    P2 = psi if per_user else psi[:, None]
    R2 = R if per_user else R[:, None]
    if payload is None:
        payload = float(np.min(np.sum(P2 * R2, axis=0)))
    tol = 1e-9 * max(1.0, payload)
    on = P2 >= 0.5
    for k in range(P2.shape[1]):
        if np.sum(R2[:, k]) < payload - tol:
            raise PayloadInfeasibleError(
                f"all slots together deliver {np.sum(R2[:, k]):.6g} of {payload:.6g}")
        for t in range(P2.shape[0]):
            if np.sum(R2[on[:, k], k]) >= payload - tol:
                break
            if not on[t, k]:
                on[t, k] = True
        for t in range(P2.shape[0] - 1, -1, -1):
            if on[t, k] and np.sum(R2[on[:, k], k]) - R2[t, k] >= payload - tol:
                on[t, k] = False
            elif on[t, k]:
                break
    res = on.astype(float)
    out.psi = res if per_user else res[:, 0]
    out.omega = (res * R2) if per_user else (res * R2)[:, 0]
    idxs = np.nonzero(on.any(axis=1))[0]
    out.latency_bound = float(idxs[-1] + 1) if idxs.size else 0.0
    return out


def delivered_bits(spec: DownlinkSpec, v: DownlinkVariables) -> np.ndarray:
    """Delivered payload bits per follower with the binary schedule of ``v``."""
    R = deliverable_rates(spec, v)
    if v.scheme == "noma":
        return np.sum(v.psi * R, axis=0) * spec.dt * spec.radio.B
    return np.full(spec.K, float(np.sum(v.psi * R)) * spec.dt * spec.radio.B)


# ---------------------------------------------------------------------------
# SCA loop
# ---------------------------------------------------------------------------

def sca_solve(spec: DownlinkSpec, N: int = 30, tol: float = 1e-4, scheme: str = "rsma",
              init: DownlinkVariables | None = None, solver: dict | None = None,
              bilinear: str = "dc") -> ScaReport:
    """Successive convex approximation of the downlink program.

    Stops when the latency bound changes by less than ``tol`` or after ``N``
    iterations.  A new iterate is accepted only if the exact objective does not
    increase.
    """
    if scheme not in SCHEMES:
        raise InvalidConfigError(f"unknown scheme {scheme!r}")
    solver = dict(solver or {})
    T, K, M = spec.T, spec.K, spec.M
    if init is not None and init.scheme == scheme:
        # auxiliaries are rebuilt because the channels may have changed
        cur = _complete(spec, scheme, init.pc, init.pp)
        if not _qos_ok(spec, cur):
            cur = init_feasible(spec, scheme)
    else:
        cur = init_feasible(spec, scheme)
    obj = objective_value(spec, cur)
    iterates = [(cur.latency_bound, obj)]
    trace = [(0, cur.latency_bound, obj, original_violation(spec, cur))]
    status = "iteration-limit"
    for n in range(1, N + 1):
        layout = build_subproblem(spec, cur, scheme, bilinear)
        sol: Solution = layout.prog.solve(x0=_pack(layout, cur), **solver)
        if sol.status == "infeasible":
            if n == 1:
                raise PayloadInfeasibleError("downlink program has no feasible point for the payload")
            status = "converged"
            break
        new = _unpack(layout, sol.x, scheme, T, K, M)
        viol = original_violation(spec, new)
        if viol > 1e-7:
            raise ConsistencyError(f"iterate {n} violates the exact signal constraints by {viol:.3g}")
        new_obj = objective_value(spec, new)
        if new_obj > obj + 1e-8 * max(1.0, abs(obj)):
            status = "converged"
            break
        change = abs(new.latency_bound - cur.latency_bound)
        cur, obj = new, new_obj
        iterates.append((cur.latency_bound, obj))
        trace.append((n, cur.latency_bound, obj, viol))
        if change < tol:
            status = "converged"
            break
    rates = deliverable_rates(spec, cur)
    final = round_schedule(cur, rates=rates, payload=spec.payload)
    final.C0 = rates * final.psi if scheme != "noma" else final.C0
    if scheme == "noma":
        final.q = rates * final.psi
    delivered = delivered_bits(spec, final)
    if np.any(delivered < spec.B0 * (1 - 1e-9)):
        raise ConsistencyError(f"rounded schedule delivers {delivered.min():.6g} of {spec.B0:.6g} bits")
    lat = final.latency_index()
    return ScaReport(scheme=scheme, iterates=iterates, status=status, final=final, relaxed=cur,
                     latency_index=lat, latency_s=lat * spec.dt,
                     objective=spec.Q_t * lat + penalty(spec, final.pp), trace=trace, delivered=delivered)


def _qos_ok(spec, v) -> bool:
    Rc, Rp = exact_rates(spec, v.pc, v.pp, v.scheme)
    tot = Rp + (v.C if v.scheme == "rsma" else 0.0)
    return bool(np.all(tot >= spec.r_th * (1 + 1e-9) + 1e-12) and np.all(np.isfinite(Rc)))


def baseline_mulp(spec: DownlinkSpec, **kw) -> ScaReport:
    return sca_solve(spec, scheme="mulp", **kw)


def baseline_noma(spec: DownlinkSpec, **kw) -> ScaReport:
    return sca_solve(spec, scheme="noma", **kw)


def solve_scheme(spec: DownlinkSpec, scheme: str, **kw) -> ScaReport:
    return sca_solve(spec, scheme=scheme, **kw)
