"""Monte Carlo coverage of the year-by-region block bootstrap interval.

    python3 scripts/coverage_study.py --reps 200 --B 200 --level 0.90
"""
import argparse
import time

import numpy as np

from tfpacc.econ import BASELINE, build_design
from tfpacc.inference import bootstrap_design, percentile_ci
from tfpacc.synth import simulate_regtable

BETA = {"dT": -0.005, "dT2": -0.001, "dP": 0.2, "dP2": -1.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--B", type=int, default=200)
    ap.add_argument("--level", type=float, default=0.90)
    ap.add_argument("--countries", type=int, default=16)
    ap.add_argument("--years", type=int, default=25)
    ap.add_argument("--heteroskedastic", action="store_true")
    ap.add_argument("--seed", type=int, default=1000)
    a = ap.parse_args()
    t0 = time.perf_counter()
    hits = np.zeros(len(BASELINE.terms))
    for r in range(a.reps):
        rt = simulate_regtable(a.countries, a.years, beta=BETA, seed=a.seed + r,
                               heteroskedastic=a.heteroskedastic)
        be = bootstrap_design(build_design(rt, BASELINE), a.B, r)
        lo, hi = percentile_ci(be.coefs, a.level)
        hits += (lo <= np.array([BETA[t] for t in be.names])) & (np.array([BETA[t] for t in be.names]) <= hi)
    for t, h in zip(BASELINE.terms, hits):
        print(f"{t:4s} coverage {100 * h / a.reps:5.1f}%  (nominal {100 * a.level:.0f}%)")
    print(f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
