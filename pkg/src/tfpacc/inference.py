"""Block bootstrap, placebo (reshuffle) tests and year-grouped cross-validation."""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tfpacc.econ import (
    _codes,
    build_design,
    fit_design,
    fit_twoway_fe,
    solve_beta,
)
from tfpacc.errors import DataValidationError, NumericalError, RankDeficiencyError
from tfpacc.parallel import pmap
from tfpacc.rng import substream

log = logging.getLogger(__name__)


def percentile_ci(draws, level=0.90, axis=0):
    """Equal-tailed percentile interval (linear interpolation between order statistics)."""
    a = round(50 * (1 - level), 12)
    return np.percentile(np.asarray(draws), [a, 100 - a], axis=axis)


def _beta_for_weights(design, w):
    use = w > 0
    cu, cidx = _codes(design.country[use])
    tu, tidx = _codes(design.year[use])
    if len(cu) < 2 or len(tu) < 2:
        raise RankDeficiencyError(design.names, "fewer than two countries or years in draw")
    beta, _, _, conv = solve_beta(design.X[use], design.y[use], cidx, tidx, w[use], len(cu),
                                  len(tu), design.names)
    if not conv:
        raise NumericalError("absorption did not converge")
    return beta


# ---------------------------------------------------------------- block bootstrap

@dataclass
class BootstrapEnsemble:
    names: list
    coefs: np.ndarray
    sample: np.ndarray
    seed: int
    redraws: int = 0
    block_keys: tuple = ("year", "region")
    groups: dict = None
    spec: object = None

    @property
    def B(self):
        return self.coefs.shape[0]

    def frame(self):
        df = pd.DataFrame(self.coefs, columns=self.names)
        df.insert(0, "draw_id", np.arange(self.B))
        return df

    def ci(self, level=0.90):
        lo, hi = percentile_ci(self.coefs, level)
        return pd.DataFrame({"term": self.names, "estimate": self.sample, "lo": lo, "hi": hi})

    def summary(self):
        out = {
            "B": int(self.B), "seed": int(self.seed), "redraws": int(self.redraws),
            "blocks": list(self.block_keys),
            "spec": self.spec.to_dict() if self.spec is not None else None,
            "groups": {str(k): int(v) for k, v in sorted(self.groups.items())} if self.groups else None,
            "terms": {},
        }
        for j, name in enumerate(self.names):
            d = {"estimate": float(self.sample[j]), "boot_sd": float(self.coefs[:, j].std(ddof=1))
                 if self.B > 1 else 0.0}
            for lv in (0.90, 0.95):
                lo, hi = percentile_ci(self.coefs[:, j], lv)
                d[f"ci{int(lv * 100)}"] = [float(lo), float(hi)]
            out["terms"][name] = d
        return out

    def to_csv(self, path):
        self.frame().to_csv(path, index=False, float_format="%.17g")

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, csv_path, summary_path=None):
        from tfpacc.econ import ModelSpec

        df = pd.read_csv(csv_path, float_precision="round_trip")
        names = [c for c in df.columns if c != "draw_id"]
        coefs = df[names].to_numpy(dtype=float)
        sample, seed, redraws, groups, spec = coefs.mean(axis=0), 0, 0, None, None
        if summary_path is not None:
            with open(summary_path) as fh:
                s = json.load(fh)
            sample = np.array([s["terms"][n]["estimate"] for n in names])
            seed, redraws = s["seed"], s["redraws"]
            groups = {k: int(v) for k, v in s["groups"].items()} if s.get("groups") else None
            spec = ModelSpec.from_dict(s["spec"]) if s.get("spec") else None
        return cls(names, coefs, sample, seed, redraws, groups=groups, spec=spec)


def _block_labels(design, block_keys):
    cols = {"year": design.year, "region": design.region, "country": design.country}
    parts = [np.asarray(cols[k]).astype(str) for k in block_keys]
    labels = parts[0]
    for p in parts[1:]:
        labels = np.char.add(np.char.add(labels, "|"), p)
    return _codes(labels)[1]


def _boot_chunk(args):
    design, blocks, nb, seed, draws, cap = args
    out, redraws = [], 0
    for b in draws:
        attempt = 0
        while True:
            rng = substream(seed, "bootstrap", b, attempt)
            counts = np.bincount(rng.integers(0, nb, size=nb), minlength=nb)
            w = design.weights * counts[blocks]
            try:
                out.append(_beta_for_weights(design, w))
                break
            except RankDeficiencyError:
                attempt += 1
                redraws += 1
                if redraws > cap:
                    raise NumericalError(f"bootstrap redraw cap {cap} exceeded") from None
    return np.array(out).reshape(len(draws), len(design.names)), redraws


def bootstrap_design(design, B=500, seed=0, block_keys=("year", "region"), workers=1, spec=None):
    """Resample blocks of rows with replacement and refit ``B`` times.

    Each draw picks as many blocks as there are distinct blocks. A block
    drawn m times enters with its regression weights multiplied by m,
    which is identical to stacking m copies of its rows. Rank-deficient
    draws are redrawn from a fresh substream; more than ``10 * B`` redraws
    in total raise NumericalError.
    """
    blocks = _block_labels(design, block_keys)
    nb = int(blocks.max()) + 1
    sample = fit_design(design, spec).beta
    cap = 10 * B
    ids = np.arange(B)
    nchunk = max(1, min(B, 4 * max(1, int(workers))))
    chunks = [c for c in np.array_split(ids, nchunk) if len(c)]
    results = pmap(_boot_chunk, [(design, blocks, nb, seed, c.tolist(), cap) for c in chunks], workers)
    coefs = np.vstack([r[0] for r in results]) if results else np.zeros((0, len(design.names)))
    redraws = sum(r[1] for r in results)
    if redraws > cap:
        raise NumericalError(f"bootstrap redraw cap {cap} exceeded")
    if redraws:
        log.info("bootstrap: %d rank-deficient draws redrawn", redraws)
    return BootstrapEnsemble(list(design.names), coefs, sample, seed, redraws, tuple(block_keys),
                             design.groups, spec)


def block_bootstrap(rt, spec, B=500, seed=0, block_keys=("year", "region"), workers=1):
    """Year-by-region block bootstrap of the coefficients of ``spec``."""
    design = build_design(rt, spec)
    counts = pd.Series(_block_labels(design, block_keys)).value_counts()
    if (counts == 0).any():
        raise DataValidationError("empty bootstrap block")
    return bootstrap_design(design, B, seed, block_keys, workers, spec)


# ---------------------------------------------------------------- placebo

@dataclass
class PlaceboDistribution:
    names: list
    coefs: np.ndarray
    sample: np.ndarray
    mode: str
    seed: int
    percentile: np.ndarray = field(default=None)
    pvalue: np.ndarray = field(default=None)
    redraws: int = 0

    def __post_init__(self):
        if self.percentile is None:
            self.percentile, self.pvalue = placebo_percentile(self.coefs, self.sample)

    def summary(self):
        return {
            "mode": self.mode, "R": int(self.coefs.shape[0]), "seed": int(self.seed),
            "terms": {n: {"estimate": float(self.sample[j]), "percentile": float(self.percentile[j]),
                          "pvalue": float(self.pvalue[j])} for j, n in enumerate(self.names)},
        }

    def frame(self):
        df = pd.DataFrame(self.coefs, columns=self.names)
        df.insert(0, "draw_id", np.arange(len(df)))
        return df


def placebo_percentile(coefs, sample):
    """Mid-rank percentile (0-100) of each sample coefficient in the placebo draws,
    and the two-sided p-value ``2 * min(pct, 100 - pct) / 100``."""
    coefs = np.atleast_2d(coefs)
    below = (coefs < sample).mean(axis=0)
    equal = (coefs == sample).mean(axis=0)
    pct = 100 * (below + 0.5 * equal)
    return pct, np.minimum(1.0, 2 * np.minimum(pct, 100 - pct) / 100)


def _base_terms(design, nterms):
    if design.groups is None:
        return design.X, None
    g = np.array([design.groups[c] for c in design.country])
    base = sum(design.X[:, k * nterms:(k + 1) * nterms] for k in range(3))
    return base, g


def _interact(base, g):
    if g is None:
        return base
    return np.hstack([base * (g == k)[:, None] for k in range(3)])


def _placebo_chunk(args):
    design, nterms, mode, seed, reps, forced = args
    base, g = _base_terms(design, nterms)
    cu, ci = _codes(design.country)
    tu, ti = _codes(design.year)
    lookup = -np.ones((len(cu), len(tu)), dtype=np.int64)
    lookup[ci, ti] = np.arange(len(design))
    labels = tu if mode == "year" else cu
    out, redraws = [], 0
    for r in reps:
        attempt = 0
        while True:
            if forced is not None:
                perm = np.asarray(forced)
            else:
                rng = substream(seed, "placebo", mode, r, attempt)
                perm = rng.permutation(len(labels))
                if (perm == np.arange(len(labels))).all():
                    attempt += 1
                    continue
            src = lookup[ci, perm[ti]] if mode == "year" else lookup[perm[ci], ti]
            ok = src >= 0
            X = _interact(base[src[ok]], None if g is None else g[ok])
            try:
                cu2, c2 = _codes(design.country[ok])
                tu2, t2 = _codes(design.year[ok])
                if len(cu2) < 2 or len(tu2) < 2:
                    raise RankDeficiencyError(design.names)
                beta, _, _, _ = solve_beta(X, design.y[ok], c2, t2, design.weights[ok], len(cu2),
                                           len(tu2), design.names)
                out.append(beta)
                break
            except RankDeficiencyError:
                if forced is not None:
                    raise
                attempt += 1
                redraws += 1
    return np.array(out).reshape(len(reps), len(design.names)), redraws


def placebo_test(rt, spec, mode="year", R=10_000, seed=0, workers=1, force_permutation=None):
    """Refit on data whose weather side is reshuffled across years or countries.

    ``mode='year'`` draws one permutation of the year labels per replicate,
    shared by all countries; ``mode='country'`` permutes country labels.
    The TFP side is untouched. Identity permutations are skipped.
    ``force_permutation`` (testing only) applies one fixed permutation.
    """
    if mode not in ("year", "country"):
        raise ValueError(f"unknown placebo mode {mode!r}")
    design = build_design(rt, spec)
    nlab = len(np.unique(design.year if mode == "year" else design.country))
    if nlab < 3:
        raise DataValidationError(f"placebo by {mode} needs at least three distinct labels")
    sample = fit_design(design, spec).beta
    nchunk = max(1, min(R, 4 * max(1, int(workers))))
    chunks = [c for c in np.array_split(np.arange(R), nchunk) if len(c)]
    res = pmap(_placebo_chunk, [(design, len(spec.terms), mode, seed, c.tolist(), force_permutation)
                                for c in chunks], workers)
    coefs = np.vstack([r[0] for r in res])
    return PlaceboDistribution(list(design.names), coefs, sample, mode, seed,
                               redraws=sum(r[1] for r in res))


# ---------------------------------------------------------------- cross-validation

@dataclass
class CVResult:
    k: int
    seed: int
    mse: float
    mse_null: float

    @property
    def reduction(self):
        return (self.mse_null - self.mse) / self.mse_null

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "mse": self.mse, "mse_null": self.mse_null,
                "reduction": self.reduction}


def _fold_predict(design, train, test, X):
    fr = fit_twoway_fe(X[train], design.y[train], design.country[train], design.year[train],
                       design.weights[train], drop_collinear=True)
    theta_bar = float(np.mean(list(fr.theta.values())))
    return fr.predict(X[test], design.country[test], design.year[test], theta_fill=theta_bar)


def kfold_cv(rt, spec, k=10, seed=0, design=None):
    """Out-of-sample MSE reduction of ``spec`` over the fixed-effects-only model.

    Years are shuffled and split into ``k`` folds; each fold's rows are
    predicted from a fit on the other folds with the held-out year effect
    set to the mean of the training year effects. Both models share folds
    and weights; collinear weather columns are dropped.
    """
    design = design or build_design(rt, spec)
    years = np.unique(design.year)
    if k > len(years):
        raise DataValidationError(f"k={k} exceeds the {len(years)} distinct years")
    rng = substream(seed, "cv")
    folds = np.array_split(rng.permutation(years), k)
    err = np.empty(len(design))
    err0 = np.empty(len(design))
    empty = np.zeros((len(design), 0))
    for fold in folds:
        test = np.isin(design.year, fold)
        train = ~test
        err[test] = design.y[test] - _fold_predict(design, train, test, design.X)
        err0[test] = design.y[test] - _fold_predict(design, train, test, empty)
    w = design.weights
    return CVResult(k, seed, float((w * err ** 2).sum() / w.sum()),
                    float((w * err0 ** 2).sum() / w.sum()))
