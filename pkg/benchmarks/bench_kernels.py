#!/usr/bin/env python3
"""Time the numba and numpy versions of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20]
    python3 benchmarks/bench_kernels.py --end-to-end   # also one receding-horizon run per back end

Kernel timings call both versions directly.  The end-to-end timing runs a
child process per back end, switching with RSMA_PLATOON_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rsma_platoon import _kernels as kern


def best_of(fn, args, repeat):
    fn(*args)  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(V=4, N=10, T=100, K=3, M=4):
    rng = np.random.default_rng(0)
    z0 = np.column_stack([np.arange(V) * 10.0, np.zeros(V), np.zeros(V), np.full(V, 14.0)])
    U = np.stack([rng.uniform(-1, 1, (V, N)), rng.uniform(-0.1, 0.1, (V, N))], axis=2)
    geo = (1.125, 1.125, 0.05, False)
    Z = kern.rollout_numpy(z0, U, *geo)
    A, B = kern.jacobians_numpy(Z, U, *geo)
    H = rng.standard_normal((T, K, M)) + 1j * rng.standard_normal((T, K, M))
    P = rng.standard_normal((T, M, K + 1)) + 1j * rng.standard_normal((T, M, K + 1))
    n = 40
    rect = (rng.uniform(0, 100, n), rng.uniform(-5, 5, n), rng.uniform(-0.3, 0.3, n),
            np.full(n, 2.25), np.full(n, 0.9), 0.0)
    return {
        "rollout": ((z0, U) + geo, kern.rollout_numba, kern.rollout_numpy),
        "jacobians": ((Z, U) + geo, kern.jacobians_numba, kern.jacobians_numpy),
        "condense": ((A, B), kern.condense_numba, kern.condense_numpy),
        "stream_gains": ((H, P), kern.stream_gains_numba, kern.stream_gains_numpy),
        "rect_overlap": (rect, kern.rect_overlap_numba, kern.rect_overlap_numpy),
    }


END_TO_END = ("import time; from rsma_platoon.scenario import scenario_s1; "
              "from rsma_platoon.mpc import receding_run; sc = scenario_s1(3); "
              "t0 = time.perf_counter(); receding_run(sc); print(time.perf_counter() - t0)")


def end_to_end():
    out = {}
    for name, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, RSMA_PLATOON_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        out[name] = float(res.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    print(f"{'kernel':<14}{'numba [us]':>12}{'numpy [us]':>12}{'speed-up':>10}")
    for name, (inputs, fast, ref) in cases().items():
        tn = best_of(fast, inputs, args.repeat)
        tp = best_of(ref, inputs, args.repeat)
        print(f"{name:<14}{tn * 1e6:12.1f}{tp * 1e6:12.1f}{tp / tn:10.2f}")
    if args.end_to_end:
        t = end_to_end()
        print(f"\nS1 receding-horizon run, K=3: numba {t['numba']:.1f} s, numpy {t['numpy']:.1f} s")


if __name__ == "__main__":
    main()
