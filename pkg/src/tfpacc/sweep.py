"""The 200-variant robustness sweep over model specs."""
import itertools
import json
import logging
import traceback
from dataclasses import dataclass

import numpy as np
import pandas as pd

from tfpacc.econ import BASELINE
from tfpacc.errors import NumericalError, TfpAccError
from tfpacc.parallel import pmap
from tfpacc.pipeline import run_spec

log = logging.getLogger(__name__)

DIMENSIONS = {
    "tvar": ("tmean", "tmin", "tmax"),
    "precip": ("include", "exclude"),
    "form": ("quadratic", "cubic"),
    "reg_weights": ("equal", "revenue"),
    "agg_weights": ("cropland", "cropland_pasture"),
    "window": ("green", "calendar"),
    "hetero": ("pooled", "lat3"),
}
RESTRICTIONS = ("drop:CHN", "drop:USA", "drop:IND", "drop:BRA", "coldest10", "hottest10",
                "years:1962-1988", "years:1989-2015")
FAILURE_LIMIT = 0.10


def enumerate_models(base=BASELINE):
    """192 unrestricted specs (Cartesian product, fixed order) then 8 restrictions of ``base``."""
    keys = list(DIMENSIONS)
    specs = [base.replace(**dict(zip(keys, combo)), restriction="none")
             for combo in itertools.product(*(DIMENSIONS[k] for k in keys))]
    specs += [base.replace(restriction=r) for r in RESTRICTIONS]
    return specs


class SweepFailure(NumericalError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class SweepReport:
    rows: pd.DataFrame
    seed: int
    B: int
    n_ensemble: int

    def summary(self):
        ok = self.rows[(self.rows["status"] == "ok") & (self.rows["restriction"] == "none")]
        v = ok["impact_mean_pct"].to_numpy(dtype=float)
        return {
            "n_specs": int(len(self.rows)),
            "n_failed": int((self.rows["status"] != "ok").sum()),
            "unrestricted_ok": int(len(v)),
            "unrestricted_mean_pct": float(v.mean()) if v.size else None,
            "unrestricted_sd_pct": float(v.std(ddof=1)) if v.size > 1 else None,
            "seed": int(self.seed), "B": int(self.B), "n_ensemble": int(self.n_ensemble),
        }

    def to_csv(self, path):
        self.rows.to_csv(path, index=False, float_format="%.17g")

    def write_manifest(self, path, extra=None):
        d = {"summary": self.summary(), "spec_hashes": list(self.rows["spec_hash"]), **(extra or {})}
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _one(args):
    bundle, spec, B, n_ensemble, seed, k = args
    try:
        res = run_spec(bundle, spec, B, n_ensemble, seed, k)
        return {**res.row(), "status": "ok", "error": ""}
    except (TfpAccError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        log.warning("spec %s failed: %s", spec.hash(), e)
        log.debug("%s", traceback.format_exc())
        return {**spec.to_dict(), "spec_hash": spec.hash(), "status": "failed",
                "error": f"{type(e).__name__}: {e}"}


def run_sweep(bundle, specs=None, B=500, n_ensemble=2000, seed=0, k=10, workers=1):
    """Run every spec; failures are recorded per row. More than 10% failures raise SweepFailure."""
    specs = enumerate_models() if specs is None else list(specs)
    hashes = [s.hash() for s in specs]
    if len(set(hashes)) != len(hashes):
        raise ValueError("duplicate specs in sweep")
    rows = pmap(_one, [(bundle, s, B, n_ensemble, seed, k) for s in specs], workers, chunksize=1)
    df = pd.DataFrame(rows)
    df.insert(0, "is_baseline", [s == BASELINE for s in specs])
    cols = list(df.columns)
    for c in ("status", "error"):
        cols.remove(c)
    df = df[cols + ["status", "error"]]
    report = SweepReport(df, seed, B, n_ensemble)
    nfail = int((df["status"] != "ok").sum())
    if nfail > FAILURE_LIMIT * len(specs):
        raise SweepFailure(f"{nfail} of {len(specs)} specs failed", report)
    return report
