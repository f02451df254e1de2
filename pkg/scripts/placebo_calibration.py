"""Null and signal behaviour of the reshuffle (placebo) test.

    python3 scripts/placebo_calibration.py --reps 100 --R 500 --mode year
"""
import argparse

import numpy as np
from scipy import stats

from tfpacc.econ import BASELINE
from tfpacc.inference import placebo_test
from tfpacc.synth import simulate_regtable


def percentiles(beta, mode, reps, R):
    return np.array([placebo_test(simulate_regtable(12, 20, beta=beta, seed=5000 + r), BASELINE, mode, R,
                                  seed=r).percentile[0] for r in range(reps)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--R", type=int, default=500)
    ap.add_argument("--mode", choices=("year", "country"), default="year")
    ap.add_argument("--signal", type=float, default=-0.05, help="linear temperature coefficient")
    a = ap.parse_args()
    null = percentiles(None, a.mode, a.reps, a.R)
    sig = percentiles({"dT": a.signal}, a.mode, a.reps, a.R)
    print(f"null: KS p = {stats.kstest(null / 100, 'uniform').pvalue:.3f}, "
          f"deciles {np.histogram(null, bins=10, range=(0, 100))[0].tolist()}")
    print(f"signal: outside [2.5, 97.5] in {100 * np.mean((sig < 2.5) | (sig > 97.5)):.0f}% of replications")


if __name__ == "__main__":
    main()
