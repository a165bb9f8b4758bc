"""Motion statistics, variance gaps and downlink rate summaries."""
from __future__ import annotations

import numpy as np

from .errors import UndefinedBaselineError
from .mpc import PlatoonTrace, _zone_mask
from .rsma_sca import DownlinkSpec, ScaReport, exact_rates
from .scenario import Scenario

QUANTITIES = ("heading", "velocity", "acceleration", "steering")


def variance_gap(v_i: float, v_0: float) -> float:
    """Relative gap |v_i - v_0| / v_0 between a variance and its baseline."""
    if v_0 == 0:
        raise UndefinedBaselineError("baseline variance is zero")
    return abs(v_i - v_0) / v_0


def motion_stats(trace: PlatoonTrace) -> dict:
    """Mean and variance pooled over vehicles and steps."""
    series = {
        "heading": trace.states[:, :, 2],
        "velocity": trace.states[:, :, 3],
        "acceleration": trace.inputs[:, :, 0],
        "steering": trace.inputs[:, :, 1],
    }
    return {q: {"mean": float(np.mean(s)), "variance": float(np.var(s))} for q, s in series.items()}


def gap_table(stats: dict, baseline: dict) -> dict:
    return {q: variance_gap(stats[q]["variance"], baseline[q]["variance"]) for q in QUANTITIES}


def slot_rates(spec: DownlinkSpec, report: ScaReport) -> dict:
    """Per-slot common and sum rates in bit/s for the final (binary) schedule."""
    v = report.final
    Rc, Rp = exact_rates(spec, v.pc, v.pp, v.scheme)
    B = spec.radio.B
    if v.scheme == "noma":
        common = np.zeros(spec.T)
        total = Rp.sum(axis=1)
    else:
        common = Rc.min(axis=1)
        total = common + Rp.sum(axis=1)
    return {"common": common * B, "sum": total * B}


def lateral_speed_in_zone(trace: PlatoonTrace, scenario: Scenario) -> float:
    """Largest |dy/dt| over steps where a vehicle body overlaps the no-change zone."""
    if scenario.no_change_zone is None:
        return 0.0
    X = trace.states[:, :, 0]
    g = scenario.geometry
    inz = _zone_mask(X[:, 1:], g, scenario.no_change_zone) | _zone_mask(X[:, :-1], g, scenario.no_change_zone)
    if not inz.any():
        return 0.0
    ydot = np.abs(np.diff(trace.states[:, :, 1], axis=1)) / trace.dt
    return float(ydot[inz].max())


def bound_violation(trace: PlatoonTrace, scenario: Scenario) -> dict:
    """Largest excess over each bound family (0 when every bound holds)."""
    Z, U = trace.states, trace.inputs
    T = U.shape[1]
    lo = np.stack([scenario.input_bounds(t)[0] for t in range(T)], axis=1)
    hi = np.stack([scenario.input_bounds(t)[1] for t in range(T)], axis=1)
    prev = np.concatenate([np.zeros((U.shape[0], 1, 2)), U[:, :-1]], axis=1)
    return {
        "state": float(max(np.max(Z - scenario.z_max), np.max(scenario.z_min - Z), 0.0)),
        "input": float(max(np.max(U - hi), np.max(lo - U), 0.0)),
        "rate": float(max(np.max(np.abs(U - prev) - scenario.du_max), 0.0)),
    }
