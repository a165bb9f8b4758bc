"""Run orchestration: full pipeline runs, validation of outputs, comparisons and sweeps.

A run directory holds

``config.json``        resolved configuration
``scenario.json``      scenario document (references, bounds, obstacles)
``trajectory.csv``     t, vehicle, x, y, heading, velocity, accel, steer, objective, clearance, collision
``comm_trace.csv``     iteration, latency_bound, objective, max_violation
``schedule.csv``       slot, psi, payload_rate_bps, common_rate_bps, sum_rate_bps
``bcd_trace.csv``      n, joint_objective, latency, control_cost, penalty, gap
``feel_loss.csv``      round, cumulative_latency_s, loss, scheme
``metrics.json``       deterministic summary (no wall-clock values)
``run_info.json``      timings and backend
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import _kernels
from .bcd import bcd_run, downlink_spec
from .config import RunConfig
from .errors import ComparisonError, InvalidConfigError
from .feel import downlink_latency, make_task, run_training
from .metrics import QUANTITIES, bound_violation, gap_table, lateral_speed_in_zone, motion_stats, slot_rates
from .mpc import PlatoonTrace
from .rsma_sca import deliverable_rates, sca_solve
from .scenario import Scenario


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def reference_trace(scenario: Scenario) -> PlatoonTrace:
    """The reference trajectory viewed as a control trace with zero inputs."""
    T = scenario.T
    V = scenario.V
    return PlatoonTrace(scenario.references.copy(), np.zeros((V, T, 2)), [], np.zeros(T + 1, dtype=bool),
                        [], [], np.zeros(T + 1), scenario.dt)


def reference_downlink(cfg: RunConfig, scheme: str | None = None):
    """Downlink block alone, with channels taken from the scenario references."""
    sc = cfg.scenario()
    tmpl = cfg.comm()
    spec = downlink_spec(reference_trace(sc), sc, tmpl)
    return spec, sca_solve(spec, N=tmpl.max_iters, tol=tmpl.tol, scheme=scheme or tmpl.scheme)


def run(cfg: RunConfig, out_dir) -> dict:
    """Full pipeline: alternating optimisation, FEEL training, metrics and files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    sc = cfg.scenario()
    tmpl, mpc_cfg, bcd_cfg, feel_cfg = cfg.comm(), cfg.mpc(), cfg.bcd(), cfg.feel()
    (out / "config.json").write_text(cfg.to_json() + "\n")
    sc.save(out / "scenario.json")

    res = bcd_run(sc, tmpl, mpc_cfg, bcd_cfg)
    t_bcd = time.perf_counter() - t_start
    state = res.state
    comm, trace, spec = state.comm, state.control, res.comm_spec

    # -- trajectory -------------------------------------------------------
    T = trace.T
    rows = []
    for t in range(T + 1):
        obj = trace.objectives[t] if t < len(trace.objectives) else ""
        for v in range(sc.V):
            a, d = (trace.inputs[v, t] if t < T else (math.nan, math.nan))
            z = trace.states[v, t]
            rows.append([t, v, *map(float, z), float(a), float(d), obj, float(trace.clearance[t]),
                         int(trace.collision_flags[t])])
    _write_csv(out / "trajectory.csv", ["t", "vehicle", "x", "y", "heading", "velocity", "accel", "steer",
                                        "objective", "clearance", "collision"], rows)

    # -- downlink ---------------------------------------------------------
    _write_csv(out / "comm_trace.csv", ["iteration", "latency_bound", "objective", "max_violation"],
               [[int(n), float(lb), float(o), float(vi)] for n, lb, o, vi in comm.trace])
    rates = slot_rates(spec, comm)
    payload = deliverable_rates(spec, comm.final) * spec.radio.B
    psi = comm.final.psi
    payload = psi * payload
    if psi.ndim == 2:  # per-follower schedule: a slot is active if any follower uses it
        payload = payload.min(axis=1)
        psi = psi.max(axis=1)
    _write_csv(out / "schedule.csv", ["slot", "psi", "payload_rate_bps", "common_rate_bps", "sum_rate_bps"],
               [[t + 1, float(psi[t]), float(payload[t]), float(rates["common"][t]), float(rates["sum"][t])]
                for t in range(spec.T)])
    _write_csv(out / "bcd_trace.csv", ["n", "joint_objective", "latency", "control_cost", "penalty", "gap"],
               [[r.n, r.objective, r.latency, r.control_cost, r.penalty, r.gap] for r in res.rows])

    # -- FEEL -------------------------------------------------------------
    f = cfg["feel"]
    shards, _ = make_task(int(f["samples"]), int(f["features"]), feel_cfg.K, feel_cfg.loss, cfg["seed"])
    round_latency = downlink_latency(comm, sc.dt, tmpl.B0)
    curve = run_training(feel_cfg, shards, latencies=round_latency)
    _write_csv(out / "feel_loss.csv", ["round", "cumulative_latency_s", "loss", "scheme"],
               [[r, c, l, tmpl.scheme] for r, c, l in zip(curve.rounds, curve.cumulative_latency, curve.loss)])

    # -- metrics ----------------------------------------------------------
    sca_obj = [o for _, _, o, _ in comm.trace]
    metrics = {
        "scenario": sc.name, "scheme": tmpl.scheme, "K": sc.K, "M": tmpl.radio.M,
        "power_dbm": cfg["radio"]["power_dbm"], "kappa": sc.kappa, "seed": cfg["seed"],
        "latency_slots": comm.latency_index, "latency_s": comm.latency_s,
        "delivered_bits_min": float(np.min(comm.delivered)),
        "sca": {"status": comm.status, "iterations": len(comm.iterates) - 1,
                "monotone": bool(np.all(np.diff(sca_obj) <= 1e-8 * (1 + np.abs(sca_obj[:-1]))))},
        "bcd": {"status": res.status, "iterations": len(res.rows), "objectives": res.objectives},
        "motion": motion_stats(trace),
        "bounds": bound_violation(trace, sc),
        "collisions": int(trace.collision_flags.sum()),
        "min_clearance": float(trace.clearance.min()),
        "zone_lateral_speed": lateral_speed_in_zone(trace, sc),
        "final_lateral_error": float(np.max(np.abs(trace.states[:, -1, 1] - sc.target_y))),
        "feel": {"final_loss": curve.loss[-1], "round_latency_s": round_latency},
        "sum_rate_bps_mean": float(np.mean(rates["sum"])),
    }
    (out / "metrics.json").write_text(_dump(metrics))
    info = {"backend": _kernels.BACKEND, "seconds_total": time.perf_counter() - t_start,
            "seconds_bcd": t_bcd}
    (out / "run_info.json").write_text(_dump(info))
    return metrics


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def load_trace(out_dir) -> tuple[PlatoonTrace, Scenario]:
    """Rebuild the control trace and scenario of a run from its files."""
    out = Path(out_dir)
    sc = Scenario.load(out / "scenario.json")
    header, rows = read_csv(out / "trajectory.csv")
    col = {h: i for i, h in enumerate(header)}
    T = max(int(r[col["t"]]) for r in rows)
    Z = np.zeros((sc.V, T + 1, 4))
    U = np.zeros((sc.V, T, 2))
    coll = np.zeros(T + 1, dtype=int)
    for r in rows:
        t, v = int(r[col["t"]]), int(r[col["vehicle"]])
        Z[v, t] = [float(r[col[k]]) for k in ("x", "y", "heading", "velocity")]
        if t < T:
            U[v, t] = [float(r[col["accel"]]), float(r[col["steer"]])]
        coll[t] = int(r[col["collision"]])
    return PlatoonTrace(Z, U, [], coll.astype(bool), [], [], np.zeros(T + 1), sc.dt), sc


def validate(out_dir) -> dict:
    """Re-read every output file and re-check the invariants.  Returns check -> bool."""
    out = Path(out_dir)
    checks: dict[str, bool] = {}
    metrics = json.loads((out / "metrics.json").read_text())
    cfg = json.loads((out / "config.json").read_text())
    trace, sc = load_trace(out)
    coll = trace.collision_flags
    checks["no_collisions"] = bool(coll.sum() == 0)
    viol = bound_violation(trace, sc)
    checks["bounds_hold"] = all(v == 0.0 for v in viol.values())
    stats = motion_stats(trace)
    checks["motion_roundtrip"] = all(
        math.isclose(stats[q][m], metrics["motion"][q][m], rel_tol=1e-9, abs_tol=1e-12)
        for q in QUANTITIES for m in ("mean", "variance"))
    if sc.no_change_zone is not None:
        checks["zone_respected"] = lateral_speed_in_zone(trace, sc) < 1e-3

    _, crow = read_csv(out / "comm_trace.csv")
    objs = np.array([float(r[2]) for r in crow])
    checks["sca_monotone"] = bool(np.all(np.diff(objs) <= 1e-8 * (1 + np.abs(objs[:-1]))))
    _, srow = read_csv(out / "schedule.csv")
    B0 = cfg["downlink"]["B0"]
    checks["payload_delivered"] = metrics["delivered_bits_min"] >= B0 * (1 - 1e-9)
    if metrics["scheme"] != "noma":
        delivered = sum(float(r[2]) for r in srow) * sc.dt
        checks["payload_delivered"] &= delivered >= B0 * (1 - 1e-9)
    last = max((int(r[0]) for r in srow if float(r[1]) >= 0.5), default=0)
    checks["latency_matches"] = last == metrics["latency_slots"]
    _, brow = read_csv(out / "bcd_trace.csv")
    bobj = np.array([float(r[1]) for r in brow])
    checks["bcd_monotone"] = bool(np.all(np.diff(bobj) <= 1e-6 * (1 + np.abs(bobj[:-1]))))
    _, frow = read_csv(out / "feel_loss.csv")
    loss = np.array([float(r[2]) for r in frow])
    checks["feel_loss_nonincreasing"] = bool(np.all(np.diff(loss) <= 1e-12 * (1 + np.abs(loss[:-1]))))
    return checks


# ---------------------------------------------------------------------------
# comparison and sweeps
# ---------------------------------------------------------------------------

def compare(run_dirs, out_dir=None) -> dict:
    """Latency tables, variance gaps against the rsma run and ordering checks."""
    runs = [json.loads((Path(d) / "metrics.json").read_text()) for d in run_dirs]
    if len(runs) < 2:
        raise ComparisonError("need at least two runs to compare")
    names = {r["scenario"] for r in runs}
    if len(names) != 1:
        raise ComparisonError(f"runs use different scenarios: {sorted(names)}")
    lat = {(r["scheme"], r["K"], r["power_dbm"]): r["latency_slots"] for r in runs}
    by_k, by_p = {}, {}
    for (s, k, p), v in sorted(lat.items()):
        by_k.setdefault(s, {}).setdefault(str(p), {})[str(k)] = v
        by_p.setdefault(s, {}).setdefault(str(k), {})[str(p)] = v
    gaps = []
    checks = []
    for r in runs:
        base = lat.get(("rsma", r["K"], r["power_dbm"]))
        b = next((x for x in runs if x["scheme"] == "rsma" and x["K"] == r["K"]
                  and x["power_dbm"] == r["power_dbm"]), None)
        if b is not None and r["scheme"] != "rsma":
            try:
                gaps.append({"scheme": r["scheme"], "K": r["K"], "power_dbm": r["power_dbm"],
                             "gap": gap_table(r["motion"], b["motion"])})
            except Exception as exc:  # zero baseline variance
                gaps.append({"scheme": r["scheme"], "K": r["K"], "error": str(exc)})
        if base is None:
            continue
    for k, p in sorted({(k, p) for _, k, p in lat}):
        chain = [lat.get((s, k, p)) for s in ("rsma", "mulp", "noma")]
        present = [c for c in chain if c is not None]
        if len(present) >= 2:
            checks.append({"check": f"ordering K={k} P={p}",
                           "pass": all(a <= b for a, b in zip(present, present[1:])), "values": chain})
    for s, per_k in by_p.items():
        for k, per_p in per_k.items():
            ps = sorted(per_p, key=float)
            if len(ps) >= 2:
                vals = [per_p[p] for p in ps]
                checks.append({"check": f"power {s} K={k}", "values": vals,
                               "pass": all(b <= a for a, b in zip(vals, vals[1:]))})
    report = {"scenario": names.pop(), "latency_vs_K": by_k, "latency_vs_power": by_p,
              "variance_gaps": gaps, "checks": checks,
              "all_pass": all(c["pass"] for c in checks)}
    if out_dir is not None:
        o = Path(out_dir)
        o.mkdir(parents=True, exist_ok=True)
        (o / "comparison.json").write_text(_dump(report))
        _write_csv(o / "latency.csv", ["scheme", "K", "power_dbm", "latency_slots"],
                   [[s, k, p, v] for (s, k, p), v in sorted(lat.items())])
    return report


def _sweep_one(args):
    overrides, out_dir, comm_only = args
    cfg = RunConfig.from_dict(overrides)
    if comm_only:
        spec, rep = reference_downlink(cfg)
        return {"scheme": cfg["scheme"], "K": cfg["K"], "power_dbm": cfg["radio"]["power_dbm"],
                "latency_slots": rep.latency_index, "sca_iterations": len(rep.iterates) - 1}
    m = run(cfg, out_dir)
    return {"scheme": m["scheme"], "K": m["K"], "power_dbm": m["power_dbm"],
            "latency_slots": m["latency_slots"], "dir": str(out_dir)}


def sweep(base: dict, schemes, Ks, powers, out_dir, jobs: int = 1, comm_only: bool = False) -> list:
    """Grid over schemes x K x power; each full run gets its own directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for s, k, p in itertools.product(schemes, Ks, powers):
        ov = json.loads(json.dumps(base))
        ov["scheme"], ov["K"] = s, int(k)
        ov.setdefault("radio", {})["power_dbm"] = float(p)
        tasks.append((ov, out / f"{s}_K{k}_P{p:g}", comm_only))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    _write_csv(out / "sweep.csv", ["scheme", "K", "power_dbm", "latency_slots"],
               [[r["scheme"], r["K"], r["power_dbm"], r["latency_slots"]] for r in results])
    if not comm_only and len(results) >= 2:
        compare([r["dir"] for r in results], out)
    return results


def cpu_count() -> int:
    return max(1, (os.cpu_count() or 1))
