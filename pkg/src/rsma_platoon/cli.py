"""Command line entry point: ``rsma-platoon run|compare|validate|sweep``."""
from __future__ import annotations

import argparse
import json
import sys

from . import runner
from .config import RunConfig
from .errors import PlatoonError
from .rsma_sca import SCHEMES
from .scenario import SCENARIOS


def _add_run_flags(p: argparse.ArgumentParser, with_out: bool = True):
    p.add_argument("--config", help="JSON file with overrides of the shipped defaults")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--vehicles", type=int, metavar="K", help="number of followers")
    p.add_argument("--antennas", type=int, metavar="M")
    p.add_argument("--power-dbm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--weather-kappa", type=float, help="rain intensity; omit for dry road")
    if with_out:
        p.add_argument("--out", required=True, metavar="DIR")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsma-platoon")
    sub = ap.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="full alternating optimisation run"))
    c = sub.add_parser("compare", help="compare completed runs")
    c.add_argument("runs", nargs="+", metavar="RUN_DIR")
    c.add_argument("--out", metavar="DIR")
    v = sub.add_parser("validate", help="re-check the files of a completed run")
    v.add_argument("run_dir")
    s = sub.add_parser("sweep", help="grid over schemes, follower counts and powers")
    _add_run_flags(s)
    s.add_argument("--schemes", nargs="+", choices=SCHEMES, default=list(SCHEMES))
    s.add_argument("--K-values", nargs="+", type=int, default=[2, 3, 4])
    s.add_argument("--powers", nargs="+", type=float, default=[25.0])
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--comm-only", action="store_true",
                   help="solve only the downlink block on the reference trajectories")
    return ap


def overrides(args) -> dict:
    ov: dict = {}
    for flag, key in (("scenario", "scenario"), ("scheme", "scheme"), ("vehicles", "K"), ("seed", "seed"),
                      ("weather_kappa", "kappa")):
        val = getattr(args, flag, None)
        if val is not None:
            ov[key] = val
    if getattr(args, "antennas", None) is not None:
        ov.setdefault("radio", {})["M"] = args.antennas
    if getattr(args, "power_dbm", None) is not None:
        ov.setdefault("radio", {})["power_dbm"] = args.power_dbm
    return ov


def _config(args) -> RunConfig:
    ov = overrides(args)
    if args.config:
        return RunConfig.from_file(args.config, ov)
    return RunConfig.from_dict(ov)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # usage errors exit with 2
    try:
        if args.command == "run":
            m = runner.run(_config(args), args.out)
            _emit({"out": args.out, "latency_slots": m["latency_slots"], "collisions": m["collisions"],
                   "bcd_iterations": m["bcd"]["iterations"]})
            return 0
        if args.command == "validate":
            checks = runner.validate(args.run_dir)
            _emit(checks)
            return 0 if all(checks.values()) else 1
        if args.command == "compare":
            rep = runner.compare(args.runs, args.out)
            _emit({"checks": rep["checks"], "all_pass": rep["all_pass"]})
            return 0 if rep["all_pass"] else 1
        base = _config(args).raw
        res = runner.sweep(base, args.schemes, args.K_values, args.powers, args.out, args.jobs, args.comm_only)
        _emit(res)
        return 0
    except PlatoonError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
