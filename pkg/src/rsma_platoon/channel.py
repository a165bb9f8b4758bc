"""Downlink channel model: path loss, imperfect CSIT and RSMA SINR/rate maths.

Channels are complex vectors of length M (antennas at the lead vehicle).  A
precoder matrix holds one common beam and K private beams, i.e. M x (K+1).
Follower indices are 0-based throughout the package.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InvalidCoefficientError, InvalidConfigError


@dataclass(frozen=True)
class RadioConfig:
    M: int = 4
    K: int = 3
    B: float = 5e6
    P_t: float = 10 ** ((25 - 30) / 10)
    noise_density: float = -174.0
    mu: float = 2.0

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise InvalidConfigError(f"need M >= 1 and K >= 1, got M={self.M}, K={self.K}")
        if not self.B > 0:
            raise InvalidConfigError(f"bandwidth must be positive, got {self.B}")
        if not self.P_t > 0:
            raise InvalidConfigError(f"transmit power must be positive, got {self.P_t}")

    @property
    def noise(self) -> float:
        return noise_power(self.noise_density, self.B)

    @classmethod
    def from_dbm(cls, power_dbm: float, **kw) -> "RadioConfig":
        return cls(P_t=dbm_to_watt(power_dbm), **kw)


@dataclass
class PrecoderMatrix:
    """Common beam ``common`` (M,) and private beams ``private`` (M, K)."""

    common: np.ndarray
    private: np.ndarray

    def __post_init__(self):
        self.common = np.asarray(self.common, dtype=complex).reshape(-1)
        self.private = np.asarray(self.private, dtype=complex)
        if self.private.ndim == 1:
            self.private = self.private.reshape(-1, 1)
        if self.private.shape[0] != self.common.shape[0]:
            raise InvalidConfigError(
                f"common beam has {self.common.shape[0]} antennas, private beams {self.private.shape[0]}")

    @property
    def M(self) -> int:
        return self.common.shape[0]

    @property
    def K(self) -> int:
        return self.private.shape[1]

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.common, self.private])

    def total_power(self) -> float:
        return float(np.sum(np.abs(self.common) ** 2) + np.sum(np.abs(self.private) ** 2))

    def feasible(self, P_t: float) -> bool:
        return self.total_power() <= P_t + 1e-9

    @classmethod
    def from_matrix(cls, P) -> "PrecoderMatrix":
        P = np.asarray(P, dtype=complex)
        return cls(P[:, 0], P[:, 1:])


@dataclass(frozen=True)
class CsitSplit:
    estimate: np.ndarray
    error_gain: float
    epsilon: float
    gain: float = field(default=0.0)

    @property
    def estimate_gain(self) -> float:
        return (1.0 - self.epsilon ** 2) * self.gain


def dbm_to_watt(dbm: float) -> float:
    return 10 ** ((dbm - 30.0) / 10.0)


def noise_power(noise_density: float, B: float) -> float:
    """Thermal noise power in W for a density in dBm/Hz over ``B`` Hz."""
    if not B > 0:
        raise InvalidConfigError(f"bandwidth must be positive, got {B}")
    return 10 ** ((noise_density - 30.0) / 10.0) * B


def path_loss_channel(d: float, config: RadioConfig, rng: np.random.Generator | None = None,
                      epsilon: float = 0.0) -> np.ndarray:
    """Deterministic channel with every coefficient d^-mu.

    With ``rng`` given, a zero-mean circular complex perturbation with
    per-coefficient variance eps^2 * |h|^2 / M is added.
    """
    if not d > 0:
        raise DegenerateGeometryError(f"distance must be positive, got {d}")
    h = np.full(config.M, float(d) ** (-config.mu), dtype=complex)
    if rng is not None and epsilon > 0:
        var = epsilon ** 2 * float(np.sum(np.abs(h) ** 2)) / config.M
        noise = rng.standard_normal(config.M) + 1j * rng.standard_normal(config.M)
        h = h + np.sqrt(var / 2.0) * noise
    return h


def motion_coefficient(z, z_est, z_max) -> float:
    """eps = ||z - z_est|| / (2 ||z_max||), clamped to 1 with a warning."""
    z = np.asarray(z, dtype=float)
    z_est = np.asarray(z_est, dtype=float)
    nmax = float(np.linalg.norm(np.asarray(z_max, dtype=float)))
    if nmax == 0:
        raise InvalidConfigError("state bound vector has zero norm")
    eps = float(np.linalg.norm(z - z_est)) / (2.0 * nmax)
    if eps > 1.0:
        warnings.warn(f"motion coefficient {eps:.4g} clamped to 1", RuntimeWarning, stacklevel=2)
        eps = 1.0
    return eps


def _check_eps(eps: float):
    if not (0.0 <= eps <= 1.0) or math.isnan(eps):
        raise InvalidCoefficientError(f"epsilon must lie in [0, 1], got {eps}")


def split_csit(h, eps: float, precoder=None) -> CsitSplit:
    """Split a channel into the transmitter's estimate and the error power.

    The gain is |p^H p|^2 * ||h||^2 when a private beam ``precoder`` is given,
    otherwise ||h||^2.
    """
    _check_eps(eps)
    h = np.asarray(h, dtype=complex)
    gain = float(np.sum(np.abs(h) ** 2))
    if precoder is not None:
        gain *= float(np.sum(np.abs(np.asarray(precoder)) ** 2)) ** 2
    est = math.sqrt(1.0 - eps ** 2) * h
    return CsitSplit(estimate=est, error_gain=eps ** 2 * gain, epsilon=float(eps), gain=gain)


def _gains(h, P: PrecoderMatrix):
    h = np.asarray(h, dtype=complex)
    if h.shape[0] != P.M:
        raise InvalidConfigError(f"channel length {h.shape[0]} does not match {P.M} antennas")
    c = abs(np.vdot(h, P.common)) ** 2
    p = np.abs(h.conj() @ P.private) ** 2
    return float(c), p


def sinr_common(h, P: PrecoderMatrix, sigma2: float) -> float:
    if not sigma2 > 0:
        raise InvalidConfigError(f"noise power must be positive, got {sigma2}")
    c, p = _gains(h, P)
    return c / (float(p.sum()) + sigma2)


def sinr_private(h, P: PrecoderMatrix, k: int, sigma2: float) -> float:
    """Private SINR of follower ``k`` (0-based) after the common stream is removed."""
    if not sigma2 > 0:
        raise InvalidConfigError(f"noise power must be positive, got {sigma2}")
    if not 0 <= k < P.K:
        raise IndexError(f"follower index {k} out of range for K={P.K}")
    _, p = _gains(h, P)
    return float(p[k]) / (float(p.sum() - p[k]) + sigma2)


def rate(gamma: float, B: float) -> float:
    if gamma < 0:
        raise InvalidCoefficientError(f"SINR must be nonnegative, got {gamma}")
    return B * math.log2(1.0 + gamma)


def common_rate(channels, P: PrecoderMatrix, sigma2: float, B: float) -> float:
    channels = list(channels)
    if not channels:
        raise InvalidConfigError("common rate needs at least one channel")
    return min(rate(sinr_common(h, P, sigma2), B) for h in channels)


def gain_error_penalty(P: PrecoderMatrix, eps, channels) -> float:
    """Sum over followers of eps_k^2 * ||p_k||^4 * ||h_k||^2."""
    eps = np.asarray(eps, dtype=float).reshape(-1)
    H = np.atleast_2d(np.asarray(channels, dtype=complex))
    if eps.shape[0] != P.K or H.shape[0] != P.K:
        raise InvalidConfigError(f"need {P.K} epsilons and channels, got {eps.shape[0]} and {H.shape[0]}")
    pw = np.sum(np.abs(P.private) ** 2, axis=0)
    hn = np.sum(np.abs(H) ** 2, axis=1)
    return float(np.sum(eps ** 2 * pw ** 2 * hn))
