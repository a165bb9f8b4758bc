"""Alternating optimisation of the downlink block and the platoon-control block.

Each outer iteration first solves the downlink program with channels and
motion coefficients taken from the previous control trace, then re-runs the
receding-horizon controller with the channel-estimation penalty priced by the
new precoders.  The joint objective counts that penalty once.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import RadioConfig, path_loss_channel
from .errors import BlockSolverError, ConsistencyError, InvalidConfigError, PlatoonError
from .mpc import CsitPenalty, MpcConfig, PlatoonTrace, control_cost, estimation_gaps, receding_run
from .rsma_sca import DownlinkSpec, ScaReport, penalty, sca_solve
from .scenario import Scenario


@dataclass
class CommTemplate:
    """Everything the downlink block needs apart from channels and motion coefficients."""

    radio: RadioConfig = field(default_factory=RadioConfig)
    B0: float = 1e8
    R_th: float = 0.5e6
    Q_t: float = 1.0
    Q_h: float = 100.0
    scheme: str = "rsma"
    max_iters: int = 30
    tol: float = 1e-4


@dataclass
class BcdConfig:
    max_outer: int = 10
    stop_tol: float | None = None  # None: 1e-5 * (1 + |objective|)

    def __post_init__(self):
        if self.max_outer < 1:
            raise InvalidConfigError(f"need at least one outer iteration, got {self.max_outer}")
        if self.stop_tol is not None and not self.stop_tol > 0:
            raise InvalidConfigError(f"stop tolerance must be positive, got {self.stop_tol}")

    def threshold(self, objective: float) -> float:
        return self.stop_tol if self.stop_tol is not None else 1e-5 * (1.0 + abs(objective))


@dataclass
class JointState:
    comm: ScaReport
    control: PlatoonTrace
    channels: np.ndarray   # (K, T, M)
    epsilons: np.ndarray   # (K, T)


@dataclass
class BcdRow:
    n: int
    objective: float
    latency: int
    control_cost: float
    penalty: float
    gap: float
    seconds: float


@dataclass
class BcdResult:
    state: JointState
    rows: list
    status: str
    history: list = field(default_factory=list)
    comm_spec: DownlinkSpec | None = None

    @property
    def objectives(self) -> list:
        return [r.objective for r in self.rows]


def link_inputs(trace: PlatoonTrace, scenario: Scenario, radio: RadioConfig):
    """Channels (K, T, M) and motion coefficients (K, T) implied by a control trace.

    Slot t uses the states at step t.  Motion coefficients follow the
    state-prediction gap normalised by twice the norm of the state bound.
    """
    T = trace.T
    pos = trace.states[:, :T, :2]
    dist = np.linalg.norm(pos[1:] - pos[:1], axis=-1)  # (K, T)
    if dist.shape[0] != radio.K:
        raise ConsistencyError(f"trace has {dist.shape[0]} followers but the radio expects {radio.K}")
    H = np.empty((radio.K, T, radio.M), dtype=complex)
    for k in range(radio.K):
        for t in range(T):
            H[k, t] = path_loss_channel(float(dist[k, t]), radio)
    gaps = estimation_gaps(trace.states, trace.inputs, scenario.geometry, scenario.dt)[1:, :T]
    eps = np.minimum(gaps / (2.0 * float(np.linalg.norm(scenario.z_max))), 1.0)
    return H, eps


def downlink_spec(trace: PlatoonTrace, scenario: Scenario, template: CommTemplate) -> DownlinkSpec:
    H, eps = link_inputs(trace, scenario, template.radio)
    return DownlinkSpec(H, eps, template.radio, scenario.dt, template.B0, template.R_th,
                        template.Q_t, template.Q_h)


def csit_penalty(report: ScaReport, scenario: Scenario, radio: RadioConfig) -> CsitPenalty:
    """Penalty factors for the controller from the downlink precoders."""
    pw = np.sum(np.abs(report.final.pp) ** 2, axis=2) * radio.P_t  # (T, K) in W
    p4 = np.zeros((scenario.V, pw.shape[0]))
    p4[1:] = (pw ** 2).T
    return CsitPenalty(p4, radio.M, radio.mu)


def joint_objective(state: JointState, scenario: Scenario, template: CommTemplate,
                    mpc_config: MpcConfig) -> tuple[float, dict]:
    """Joint objective and its parts.

    Latency (slot index of the last scheduled slot) weighted by Q_t, the
    channel-estimation penalty with channels from the control trace, and the
    control terms over the whole run.
    """
    H, eps = link_inputs(state.control, scenario, template.radio)
    if state.channels.shape != H.shape or state.epsilons.shape != eps.shape:
        raise ConsistencyError("stored channels do not match the control trace shape")
    bad = ~np.all(np.isclose(state.channels, H, rtol=1e-12, atol=0.0), axis=(0, 2))
    bad |= ~np.all(np.isclose(state.epsilons, eps, rtol=1e-12, atol=1e-15), axis=0)
    if np.any(bad):
        raise ConsistencyError("channels or motion coefficients disagree with the control trace",
                               int(np.argmax(bad)) + 1)
    spec = DownlinkSpec(H, eps, template.radio, scenario.dt, template.B0, template.R_th,
                        template.Q_t, template.Q_h)
    lat = state.comm.latency_index
    pen = penalty(spec, state.comm.final.pp)
    ctrl = control_cost(state.control, scenario, mpc_config)
    total = template.Q_t * lat + pen + ctrl
    return total, {"latency": lat, "penalty": pen, "control": ctrl}


def bcd_run(scenario: Scenario, template: CommTemplate | None = None, mpc_config: MpcConfig | None = None,
            config: BcdConfig | None = None, solver: dict | None = None, log=None) -> BcdResult:
    """Alternate the two blocks until the joint objective settles.

    The control block is initialised by one controller run without the
    channel-estimation penalty.  An outer iteration whose joint objective is
    higher than the previous one is discarded and the loop stops.
    """
    template = template or CommTemplate(radio=RadioConfig(K=scenario.K))
    mpc_config = mpc_config or MpcConfig(Q_h=template.Q_h)
    config = config or BcdConfig()
    if template.radio.K != scenario.K:
        raise InvalidConfigError(f"radio has K={template.radio.K} but the scenario has {scenario.K} followers")
    try:
        control = receding_run(scenario, mpc_config)
    except PlatoonError as exc:
        raise BlockSolverError(0, exc) from exc
    comm = None
    rows: list[BcdRow] = []
    history = []
    best: JointState | None = None
    best_spec = None
    prev_obj = math.inf
    status = "iteration-limit"
    for n in range(1, config.max_outer + 1):
        t0 = time.perf_counter()
        try:
            spec = downlink_spec(control, scenario, template)
            comm = sca_solve(spec, N=template.max_iters, tol=template.tol, scheme=template.scheme,
                             init=comm.relaxed if comm is not None else None, solver=solver)
            new_control = receding_run(scenario, mpc_config, penalty=csit_penalty(comm, scenario, template.radio))
        except PlatoonError as exc:
            raise BlockSolverError(n, exc) from exc
        H, eps = link_inputs(new_control, scenario, template.radio)
        state = JointState(comm, new_control, H, eps)
        obj, parts = joint_objective(state, scenario, template, mpc_config)
        history.append(obj)
        if obj > prev_obj + 1e-6 * (1.0 + abs(prev_obj)):
            status = "converged"
            break
        gap = abs(prev_obj - obj) if math.isfinite(prev_obj) else math.inf
        rows.append(BcdRow(n, obj, parts["latency"], parts["control"], parts["penalty"], gap,
                           time.perf_counter() - t0))
        if log is not None:
            log(rows[-1])
        best, best_spec, control, prev_obj = state, spec, new_control, obj
        limit = config.threshold(obj)
        if gap < limit or math.isinf(limit):
            status = "converged"
            break
    return BcdResult(best, rows, status, history, best_spec)
