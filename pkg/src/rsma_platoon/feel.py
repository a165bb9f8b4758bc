"""Federated edge learning rounds on synthetic convex tasks.

Workers compute full-batch gradients of their local loss, the lead vehicle
averages them and takes one gradient step, then broadcasts the model.  The
broadcast latency of a round is the index of the last slot the downlink
schedule uses, times the slot length.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, PayloadInfeasibleError, StepSizeError

LOSSES = ("least-squares", "logistic")


@dataclass
class ModelVector:
    parameters: np.ndarray
    precision: int = 32

    def __post_init__(self):
        self.parameters = np.asarray(self.parameters, dtype=float).reshape(-1)

    @property
    def bit_size(self) -> int:
        return self.parameters.size * self.precision


@dataclass
class LocalDataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] == 0:
            raise InvalidConfigError("local dataset is empty")
        if self.X.shape[0] != self.y.shape[0]:
            raise InvalidConfigError("features and labels differ in length")

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class FeelConfig:
    step_size: float = 0.1
    rounds: int = 20
    K: int = 3
    loss: str = "least-squares"
    weighted: bool = False
    precision: int = 32

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidConfigError(f"step size must be positive, got {self.step_size}")
        if self.loss not in LOSSES:
            raise InvalidConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.rounds < 0 or self.K < 1:
            raise InvalidConfigError("rounds must be nonnegative and K positive")


@dataclass
class LossCurve:
    rounds: list = field(default_factory=list)
    cumulative_latency: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    params: list = field(default_factory=list)


def _check_dims(w, D: LocalDataset):
    if D.X.shape[1] != w.shape[0]:
        raise InvalidConfigError(f"model has {w.shape[0]} parameters but features have {D.X.shape[1]}")


def local_loss(w, D: LocalDataset, loss: str = "least-squares") -> float:
    w = np.asarray(w, dtype=float)
    _check_dims(w, D)
    z = D.X @ w
    if loss == "least-squares":
        return float(0.5 * np.mean((z - D.y) ** 2))
    if loss == "logistic":
        # labels in {-1, +1}
        return float(np.mean(np.logaddexp(0.0, -D.y * z)))
    raise InvalidConfigError(f"unknown loss {loss!r}")


def local_gradient(w, D: LocalDataset, loss: str = "least-squares") -> np.ndarray:
    """Full-batch gradient of the mean sample loss."""
    w = np.asarray(w, dtype=float)
    _check_dims(w, D)
    z = D.X @ w
    if loss == "least-squares":
        r = z - D.y
    elif loss == "logistic":
        r = -D.y * 0.5 * (1.0 - np.tanh(0.5 * D.y * z))  # -y * sigmoid(-y z)
    else:
        raise InvalidConfigError(f"unknown loss {loss!r}")
    return D.X.T @ r / len(D)


def aggregate(gradients, sizes=None, weighted: bool = False) -> np.ndarray:
    """Mean of worker gradients; sample-size weighted when ``weighted``."""
    G = [np.asarray(g, dtype=float).reshape(-1) for g in gradients]
    if not G:
        raise InvalidConfigError("nothing to aggregate")
    d = G[0].shape[0]
    if any(g.shape[0] != d for g in G):
        raise InvalidConfigError("gradients differ in dimension")
    G = np.stack(G)
    if weighted:
        if sizes is None:
            raise InvalidConfigError("weighted aggregation needs the shard sizes")
        w = np.asarray(sizes, dtype=float)
        return (w[:, None] * G).sum(axis=0) / w.sum()
    return G.mean(axis=0)


def global_update(w, g, eta: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    if w.shape != g.shape:
        raise InvalidConfigError("model and gradient differ in shape")
    return w - eta * g


def downlink_latency(downlink, dt: float, bit_size: float) -> float:
    """Seconds until the last scheduled slot; checks the payload was delivered."""
    if downlink is None or bit_size == 0:
        return 0.0
    delivered = getattr(downlink, "delivered", None)
    if delivered is not None and np.min(delivered) < bit_size * (1 - 1e-9):
        raise PayloadInfeasibleError(
            f"downlink delivers {np.min(delivered):.6g} bits, model needs {bit_size:.6g}")
    return downlink.latency_index * dt


def feel_round(w, datasets, eta: float, downlink=None, dt: float = 0.05, loss: str = "least-squares",
               weighted: bool = False, bit_size: float | None = None):
    """One round: local gradients, aggregation, update and broadcast latency."""
    w = np.asarray(w, dtype=float)
    grads = [local_gradient(w, D, loss) for D in datasets]
    g = aggregate(grads, [len(D) for D in datasets], weighted)
    w_new = global_update(w, g, eta)
    bits = w.size * 32 if bit_size is None else bit_size
    return w_new, downlink_latency(downlink, dt, bits)


def global_loss(w, datasets, loss: str = "least-squares", weighted: bool = False) -> float:
    vals = [local_loss(w, D, loss) for D in datasets]
    if weighted:
        n = np.array([len(D) for D in datasets], dtype=float)
        return float(np.dot(n, vals) / n.sum())
    return float(np.mean(vals))


def smoothness(datasets, loss: str = "least-squares", weighted: bool = False) -> float:
    """Lipschitz constant of the aggregated gradient."""
    Hs = [D.X.T @ D.X / len(D) for D in datasets]
    if weighted:
        n = np.array([len(D) for D in datasets], dtype=float)
        H = sum(ni * Hi for ni, Hi in zip(n, Hs)) / n.sum()
    else:
        H = sum(Hs) / len(Hs)
    L = float(np.linalg.eigvalsh(H)[-1])
    return L / 4.0 if loss == "logistic" else L


def make_task(n: int = 600, d: int = 8, K: int = 3, loss: str = "least-squares", seed: int = 0,
              noise: float = 0.1):
    """Synthetic centred regression or classification data split into K equal shards."""
    if n % K:
        raise InvalidConfigError(f"{n} samples do not split into {K} equal shards")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    X -= X.mean(axis=0)
    w_true = rng.standard_normal(d)
    z = X @ w_true
    if loss == "logistic":
        y = np.where(z + noise * rng.standard_normal(n) >= 0, 1.0, -1.0)
    else:
        y = z + noise * rng.standard_normal(n)
        y -= y.mean()
    shards = [LocalDataset(X[i::K], y[i::K]) for i in range(K)]
    return shards, LocalDataset(X, y)


def run_training(config: FeelConfig, datasets, w0=None, latencies=None) -> LossCurve:
    """Chain ``config.rounds`` rounds; ``latencies`` gives seconds per round (scalar or list)."""
    d = datasets[0].X.shape[1]
    w = np.zeros(d) if w0 is None else np.asarray(w0, dtype=float).copy()
    if latencies is None:
        lat = [0.0] * config.rounds
    elif np.ndim(latencies) == 0:
        lat = [float(latencies)] * config.rounds
    else:
        lat = [float(x) for x in latencies]
        if len(lat) < config.rounds:
            raise InvalidConfigError("fewer round latencies than rounds")
    curve = LossCurve([0], [0.0], [global_loss(w, datasets, config.loss, config.weighted)], [w.copy()])
    rises = 0
    for r in range(1, config.rounds + 1):
        w, _ = feel_round(w, datasets, config.step_size, None, loss=config.loss, weighted=config.weighted)
        val = global_loss(w, datasets, config.loss, config.weighted)
        if not np.isfinite(val):
            raise StepSizeError(f"loss became non-finite at round {r}")
        rises = rises + 1 if val > curve.loss[-1] else 0
        if rises >= 5:
            raise StepSizeError(f"loss rose for 5 consecutive rounds (round {r}); reduce the step size")
        curve.rounds.append(r)
        curve.cumulative_latency.append(curve.cumulative_latency[-1] + lat[r - 1])
        curve.loss.append(val)
        curve.params.append(w.copy())
    return curve
