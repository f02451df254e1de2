"""Model specs, design matrices and the two-way fixed-effects estimator.

The estimator absorbs country and year effects by alternating weighted
demeaning, then solves weighted least squares on the demeaned data.
"""
import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from tfpacc.dataio import PRECIP_SCALE, weather_terms
from tfpacc.errors import DataValidationError, NumericalError, RankDeficiencyError

log = logging.getLogger(__name__)

SPEC_CHOICES = {
    "tvar": ("tmean", "tmin", "tmax"),
    "precip": ("include", "exclude"),
    "form": ("quadratic", "cubic", "linear"),
    "reg_weights": ("equal", "revenue"),
    "agg_weights": ("cropland", "cropland_pasture"),
    "window": ("green", "calendar"),
    "hetero": ("pooled", "lat3"),
    "dependent": ("tfp_growth", "output_growth"),
}
_RESTRICTION = re.compile(r"^(none|coldest10|hottest10|drop:[^\s:]+|years:\d{4}-\d{4})$")
DEPENDENT_COLUMN = {"tfp_growth": "dln_tfp", "output_growth": "dln_output"}


@dataclass(frozen=True)
class ModelSpec:
    tvar: str = "tmean"
    precip: str = "include"
    form: str = "quadratic"
    reg_weights: str = "equal"
    agg_weights: str = "cropland"
    window: str = "green"
    hetero: str = "pooled"
    restriction: str = "none"
    dependent: str = "tfp_growth"

    def __post_init__(self):
        for k, choices in SPEC_CHOICES.items():
            if getattr(self, k) not in choices:
                raise DataValidationError(f"ModelSpec.{k}={getattr(self, k)!r} not in {choices}")
        if not _RESTRICTION.match(self.restriction):
            raise DataValidationError(f"bad restriction {self.restriction!r}")

    @property
    def terms(self):
        return weather_terms(self.precip == "include", self.form)

    def key(self):
        return "|".join(f"{k}={v}" for k, v in asdict(self).items())

    def hash(self):
        return hashlib.sha256(self.key().encode()).hexdigest()[:16]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def replace(self, **kw):
        return ModelSpec(**{**asdict(self), **kw})


BASELINE = ModelSpec()


# ---------------------------------------------------------------- design

@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    country: np.ndarray
    year: np.ndarray
    region: np.ndarray
    names: list
    groups: dict = None  # country -> latitude group, lat3 only

    def __len__(self):
        return len(self.y)

    def subset(self, mask):
        return Design(self.X[mask], self.y[mask], self.weights[mask], self.country[mask],
                      self.year[mask], self.region[mask], self.names, self.groups)

    def with_columns(self, X, names):
        return Design(X, self.y, self.weights, self.country, self.year, self.region, list(names),
                      self.groups)


def apply_restriction(data, restriction, tcol="T"):
    """Filter a RegTable frame by a restriction token."""
    if restriction == "none":
        return data
    if restriction.startswith("drop:"):
        c = restriction[5:]
        if c not in set(data["country"]):
            log.warning("restriction %s: country not in sample", restriction)
        return data[data["country"] != c]
    if restriction.startswith("years:"):
        a, b = (int(x) for x in restriction[6:].split("-"))
        return data[(data["year"] >= a) & (data["year"] <= b)]
    # coldest10 / hottest10 on unweighted country mean seasonal temperature
    means = data.groupby("country")[tcol].mean()
    order = sorted(means.index, key=lambda c: (means[c], c))
    n = max(1, int(round(0.1 * len(order))))
    drop = order[:n] if restriction == "coldest10" else order[-n:]
    return data[~data["country"].isin(drop)]


def build_design(rt, spec):
    """Design matrix, response and weights for ``spec`` from a RegTable.

    Columns follow ``spec.terms``; with ``hetero='lat3'`` every term is
    interacted with the three latitude groups (names ``term@g0`` ...).
    Revenue weights are rescaled to mean one over the retained rows.
    """
    data = rt.data
    terms = spec.terms
    missing = [t for t in terms if t not in data.columns]
    if missing:
        raise DataValidationError(f"RegTable lacks columns {missing} required by the model spec")
    if rt.tvar != spec.tvar:
        raise DataValidationError(f"RegTable built for {rt.tvar}, spec asks for {spec.tvar}")
    ycol = DEPENDENT_COLUMN[spec.dependent]
    if ycol not in data.columns:
        raise DataValidationError(f"RegTable has no {ycol} column")
    data = apply_restriction(data, spec.restriction)
    data = data.dropna(subset=[ycol])
    if data.empty:
        raise DataValidationError(f"empty design after restriction {spec.restriction}")

    if spec.reg_weights == "revenue":
        w = data["rev_weight"].to_numpy(dtype=float)
        if not w.mean() > 0:
            raise DataValidationError("revenue weights are all zero")
        w = w / w.mean()
    else:
        w = np.ones(len(data))

    base = data[terms].to_numpy(dtype=float)
    groups = None
    if spec.hetero == "lat3":
        g = data["lat_group"].to_numpy()
        cols, names = [], []
        for k in range(3):
            cols.append(base * (g == k)[:, None])
            names += [f"{t}@g{k}" for t in terms]
        X = np.hstack(cols)
        groups = dict(zip(data["country"], data["lat_group"].astype(int)))
    else:
        X, names = base, list(terms)
    return Design(X, data[ycol].to_numpy(dtype=float), w, data["country"].to_numpy(),
                  data["year"].to_numpy(dtype=int), data["region"].to_numpy(), names, groups)


# ---------------------------------------------------------------- estimator

def _wmeans(Z, idx, w, n):
    den = np.bincount(idx, weights=w, minlength=n)
    out = np.empty((n, Z.shape[1]))
    for j in range(Z.shape[1]):
        out[:, j] = np.bincount(idx, weights=w * Z[:, j], minlength=n)
    return out / den[:, None]


def absorb(Z, cidx, tidx, w, nc, nt, tol=1e-10, max_iter=10_000):
    """Remove weighted country and year means from the columns of ``Z``.

    Alternates the two projections until the largest update, relative to
    each column's scale, drops below ``tol``. Returns (Zd, iterations, converged).
    """
    Z = np.array(Z, dtype=float, copy=True)
    scale = np.maximum(np.abs(Z).max(axis=0), 1e-300)
    for it in range(1, max_iter + 1):
        mc = _wmeans(Z, cidx, w, nc)
        Z -= mc[cidx]
        mt = _wmeans(Z, tidx, w, nt)
        Z -= mt[tidx]
        delta = max((np.abs(mc).max(axis=0) / scale).max(initial=0.0),
                    (np.abs(mt).max(axis=0) / scale).max(initial=0.0))
        if delta < tol:
            return Z, it, True
    return Z, max_iter, False


def _independent_columns(A, ref_norms, rtol=1e-8):
    """Indices of columns not (numerically) in the span of earlier ones.

    Residual norms are compared against ``ref_norms``, the column norms
    before absorption, so columns wiped out by the fixed effects also drop.
    """
    keep = []
    Q = np.zeros((A.shape[0], 0))
    for j in range(A.shape[1]):
        a = A[:, j]
        na = ref_norms[j]
        if na == 0:
            continue
        r = a - Q @ (Q.T @ a)
        r = r - Q @ (Q.T @ r)
        nr = np.linalg.norm(r)
        if nr > rtol * na:
            keep.append(j)
            Q = np.column_stack([Q, r / nr])
    return keep


def _codes(labels):
    uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
    return uniq, inv.astype(np.int64)


def solve_beta(X, y, cidx, tidx, w, nc, nt, names=None, tol=1e-10, max_iter=10_000,
               drop_collinear=False):
    """Core WLS after absorption. Returns (beta, kept, iterations, converged)."""
    k = X.shape[1]
    Z = np.column_stack([y, X])
    Zd, iters, conv = absorb(Z, cidx, tidx, w, nc, nt, tol, max_iter)
    if not conv:
        log.warning("fixed-effect absorption did not converge in %d iterations", iters)
    sw = np.sqrt(w)
    A = Zd[:, 1:] * sw[:, None]
    b = Zd[:, 0] * sw
    beta = np.zeros(k)
    ref = np.linalg.norm(X * sw[:, None], axis=0)
    kept = _independent_columns(A, ref) if k else []
    if len(kept) < k:
        dropped = [names[j] if names else j for j in range(k) if j not in kept]
        if not drop_collinear:
            raise RankDeficiencyError(dropped)
        log.info("dropping collinear columns %s", dropped)
    if kept:
        sol, *_ = np.linalg.lstsq(A[:, kept], b, rcond=None)
        beta[kept] = sol
    return beta, kept, iters, conv


def recover_effects(r, cidx, tidx, w, nc, nt, tol=1e-10, max_iter=10_000):
    """Country/year effects of ``r``: r ~ mu + a[c] + b[t], weighted means of a, b zero."""
    e = np.array(r, dtype=float, copy=True)
    a = np.zeros(nc)
    b = np.zeros(nt)
    scale = max(np.abs(e).max(initial=0.0), 1e-300)
    for _ in range(max_iter):
        mc = np.bincount(cidx, w * e, nc) / np.bincount(cidx, w, nc)
        a += mc
        e -= mc[cidx]
        mt = np.bincount(tidx, w * e, nt) / np.bincount(tidx, w, nt)
        b += mt
        e -= mt[tidx]
        if max(np.abs(mc).max(), np.abs(mt).max()) / scale < tol:
            break
    W = w.sum()
    ma = (w * a[cidx]).sum() / W
    mb = (w * b[tidx]).sum() / W
    return ma + mb, a - ma, b - mb, e


@dataclass
class FitResult:
    names: list
    beta: np.ndarray
    intercept: float
    alpha: dict
    theta: dict
    residuals: np.ndarray
    n: int
    r2_within: float
    iterations: int
    converged: bool
    dropped: list = field(default_factory=list)
    groups: dict = None
    spec: ModelSpec = None

    def coef(self):
        return pd.Series(self.beta, index=self.names, name="coef")

    def predict(self, X, country, year, theta_fill=None):
        """Fitted values; unseen years use ``theta_fill`` (default 0), unseen countries 0."""
        a = np.array([self.alpha.get(c, 0.0) for c in country])
        fill = 0.0 if theta_fill is None else theta_fill
        t = np.array([self.theta.get(int(y), fill) for y in year])
        return self.intercept + a + t + np.asarray(X) @ self.beta

    def to_dict(self):
        return {
            "spec": self.spec.to_dict() if self.spec else None,
            "terms": list(self.names),
            "coefficients": dict(zip(self.names, map(float, self.beta))),
            "dropped": list(self.dropped),
            "intercept": float(self.intercept),
            "n": int(self.n),
            "r2_within": float(self.r2_within),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "groups": {str(k): int(v) for k, v in sorted(self.groups.items())} if self.groups else None,
            "alpha": {str(k): float(v) for k, v in sorted(self.alpha.items())},
            "theta": {str(k): float(v) for k, v in sorted(self.theta.items())},
        }

    def to_json(self, path=None):
        s = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s + "\n")
        return s

    def coefficient_table(self, draws=None):
        """Coefficient table (estimate plus bootstrap sd and 90/95% bounds when draws given)."""
        tab = pd.DataFrame({"term": self.names, "estimate": self.beta})
        if draws is not None:
            d = np.asarray(draws)
            tab["boot_sd"] = d.std(axis=0, ddof=1)
            for q in (2.5, 5, 95, 97.5):
                tab[f"q{q:g}"] = np.percentile(d, q, axis=0)
        return tab


def fit_twoway_fe(X, y, country, year, weights=None, names=None, tol=1e-10, max_iter=10_000,
                  drop_collinear=False):
    """Weighted two-way fixed-effects regression.

    Parameters
    ----------
    X : (n, k) regressors
    y : (n,) response
    country, year : (n,) labels of the absorbed effects
    weights : (n,) nonnegative regression weights (default equal); zero-weight rows are ignored
    drop_collinear : if False a rank-deficient design raises RankDeficiencyError;
        if True the later of any collinear columns get coefficient 0

    Returns
    -------
    FitResult with ``y = intercept + alpha[c] + theta[t] + X @ beta + residual``
    and alpha, theta normalized to weighted mean zero over the sample.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any() or not np.isfinite(w).all():
        raise DataValidationError("weights must be finite and nonnegative")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataValidationError("non-finite values in design")
    use = w > 0
    X, y, w = X[use], y[use], w[use]
    country = np.asarray(country)[use]
    year = np.asarray(year)[use]
    cu, cidx = _codes(country)
    tu, tidx = _codes(year)
    if len(cu) < 2 or len(tu) < 2:
        raise DataValidationError("need at least two countries and two years")
    beta, kept, iters, conv = solve_beta(X, y, cidx, tidx, w, len(cu), len(tu), names, tol,
                                         max_iter, drop_collinear)
    if not conv:
        raise NumericalError(f"absorption failed to converge in {max_iter} iterations")
    r = y - X @ beta
    mu, a, b, e = recover_effects(r, cidx, tidx, w, len(cu), len(tu), tol, max_iter)
    Zd, _, _ = absorb(y[:, None], cidx, tidx, w, len(cu), len(tu), tol, max_iter)
    tss = float((w * Zd[:, 0] ** 2).sum())
    r2 = 1.0 - float((w * e ** 2).sum()) / tss if tss > 0 else float("nan")
    return FitResult(
        names=names, beta=beta, intercept=float(mu),
        alpha=dict(zip(cu.tolist(), a.tolist())),
        theta={int(t): v for t, v in zip(tu.tolist(), b.tolist())},
        residuals=e, n=int(n - (~use).sum()), r2_within=r2, iterations=iters, converged=conv,
        dropped=[names[j] for j in range(k) if j not in kept],
    )


def fit_design(design, spec=None, **kw):
    fr = fit_twoway_fe(design.X, design.y, design.country, design.year, design.weights,
                       design.names, **kw)
    fr.groups = design.groups
    fr.spec = spec
    return fr


def fit_spec(rt, spec, **kw):
    return fit_design(build_design(rt, spec), spec, **kw)


# ---------------------------------------------------------------- response curves

def _poly_coefs(coefs, variable, group=None):
    """[b1, b2, b3] of the polynomial in d<variable> (missing powers -> 0)."""
    coefs = pd.Series(coefs) if not isinstance(coefs, pd.Series) else coefs
    sfx = f"@g{group}" if group is not None else ""
    out = []
    for p in (1, 2, 3):
        name = f"d{variable}{'' if p == 1 else p}{sfx}"
        out.append(float(coefs.get(name, 0.0)))
    return np.array(out)


def response_curve(coefs, variable, grid, exposure, exposure_weights=None, group=None):
    """Polynomial response in levels, centered on the exposure distribution.

    ``f(x) = b1 x + b2 x^2 + b3 x^3`` minus the constant that makes the
    exposure-weighted mean of ``f`` zero. ``variable`` is ``"T"`` (degC) or
    ``"P"`` (mm; evaluated internally in 1,000 mm). ``marginal`` is df/dx
    per degC or per mm.
    """
    if isinstance(coefs, FitResult):
        coefs = coefs.coef()
    scale = PRECIP_SCALE if variable == "P" else 1.0
    b = _poly_coefs(coefs, variable, group)
    x = np.asarray(grid, dtype=float) / scale
    xe = np.asarray(exposure, dtype=float) / scale
    we = np.ones_like(xe) if exposure_weights is None else np.asarray(exposure_weights, dtype=float)

    def f(v):
        return b[0] * v + b[1] * v ** 2 + b[2] * v ** 3

    center = float((we * f(xe)).sum() / we.sum())
    return pd.DataFrame({
        "x": np.asarray(grid, dtype=float),
        "effect": f(x) - center,
        "marginal": (b[0] + 2 * b[1] * x + 3 * b[2] * x ** 2) / scale,
    })


def response_bands(draws, names, variable, grid, exposure, exposure_weights=None, group=None,
                   levels=(0.90, 0.95)):
    """Pointwise percentile bands of centered response curves over coefficient draws."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    curves = np.vstack([
        response_curve(pd.Series(d, index=names), variable, grid, exposure, exposure_weights,
                       group)["effect"].to_numpy()
        for d in draws
    ])
    out = pd.DataFrame({"x": np.asarray(grid, dtype=float), "mean": curves.mean(axis=0)})
    for lv in levels:
        lo, hi = round(50 * (1 - lv), 12), round(50 * (1 + lv), 12)
        out[f"lo{int(lv * 100)}"] = np.percentile(curves, lo, axis=0)
        out[f"hi{int(lv * 100)}"] = np.percentile(curves, hi, axis=0)
    return out


# ---------------------------------------------------------------- auxiliary tests

@dataclass
class LagTestResult:
    lags: int
    first_lag: int
    sums: dict
    wald: dict
    pvalue: dict
    fit: FitResult
    draws: np.ndarray


def lagged_design(rt, spec, lags):
    """Design with each weather term at lags 0..L (``term_L<l>``); rows lacking history dropped."""
    if spec.hetero != "pooled":
        raise DataValidationError("lag test supports pooled specifications only")
    data = apply_restriction(rt.data, spec.restriction)
    terms = spec.terms
    span = data.groupby("country")["year"].agg(lambda s: s.max() - s.min())
    if lags < 0 or lags > span.max() - 1:
        raise DataValidationError(f"{lags} lags exceed the available history")
    base = data[["country", "year"] + terms]
    df = data
    for l in range(1, lags + 1):
        shifted = base.assign(year=base["year"] + l).rename(columns={t: f"{t}_L{l}" for t in terms})
        df = df.merge(shifted, on=["country", "year"], how="inner")
    df = df.rename(columns={t: f"{t}_L0" for t in terms})
    names = [f"{t}_L{l}" for t in terms for l in range(lags + 1)]
    ycol = DEPENDENT_COLUMN[spec.dependent]
    if df["year"].nunique() < 2 or df["country"].nunique() < 2:
        raise DataValidationError(f"{lags} lags exceed the available history")
    w = np.ones(len(df))
    if spec.reg_weights == "revenue":
        w = df["rev_weight"].to_numpy(dtype=float)
        w = w / w.mean()
    return Design(df[names].to_numpy(dtype=float), df[ycol].to_numpy(dtype=float), w,
                  df["country"].to_numpy(), df["year"].to_numpy(dtype=int),
                  df["region"].to_numpy(), names)


def cumulative_lag_test(rt, spec, lags, B=500, seed=0, include_contemporaneous=None, workers=1):
    """Wald test that the summed lag coefficients of each weather variable vanish.

    By default the sum runs over past lags 1..L (for L = 0, over the
    contemporaneous coefficient). ``include_contemporaneous=True`` sums
    lags 0..L instead, i.e. tests the total cumulative effect. The
    covariance of the sums comes from the year-by-region block bootstrap.
    """
    from tfpacc.inference import bootstrap_design

    design = lagged_design(rt, spec, lags)
    fr = fit_design(design, spec)
    draws = bootstrap_design(design, B, seed, workers=workers).coefs
    if include_contemporaneous is None:
        include_contemporaneous = lags == 0
    first = 0 if include_contemporaneous else 1
    terms = spec.terms
    sums, wald, pval = {}, {}, {}
    for var in ("T", "P"):
        vt = [t for t in terms if t.startswith(f"d{var}")]
        if not vt:
            continue
        S = np.zeros((len(vt), len(design.names)))
        for i, t in enumerate(vt):
            for l in range(first, lags + 1):
                S[i, design.names.index(f"{t}_L{l}")] = 1.0
        s = S @ fr.beta
        sd = draws @ S.T
        V = np.atleast_2d(np.cov(sd, rowvar=False))
        W = float(s @ np.linalg.pinv(V) @ s)
        sums[var] = s
        wald[var] = W
        pval[var] = float(stats.chi2.sf(W, len(vt)))
    return LagTestResult(lags, first, sums, wald, pval, fr, draws)


@dataclass
class SlopeTestResult:
    split: int
    estimate: float
    pvalue: float
    draws: np.ndarray
    fit: FitResult


def slope_change_test(rt, spec=BASELINE, split=1989, B=500, seed=0, workers=1):
    """Bootstrap test for a change in the linear temperature slope at ``split``.

    Fits ``dT + dT*1[year >= split]`` (plus the spec's precipitation terms)
    and returns the two-sided percentile-of-zero p-value of the interaction.
    """
    from tfpacc.inference import bootstrap_design

    data = apply_restriction(rt.data, spec.restriction)
    early = data["year"] < split
    for part in (data[early], data[~early]):
        if part["year"].nunique() < 1 or part.empty:
            raise DataValidationError(f"period split at {split} leaves an empty period")
    if data["year"].nunique() < 3:
        raise DataValidationError("slope change test needs at least three years")
    sub = type(rt)(data, rt.tvar, rt.precip, rt.form, rt.drop_log)
    full = build_design(sub, spec.replace(hetero="pooled", restriction="none"))
    dT = full.X[:, full.names.index("dT")]
    late = (full.year >= split).astype(float)
    pterms = [t for t in full.names if t.startswith("dP")]
    names = ["dT", "dT_late"] + pterms
    X = np.column_stack([dT, dT * late] + [full.X[:, full.names.index(t)] for t in pterms])
    design = full.with_columns(X, names)
    lin = spec.replace(form="linear", hetero="pooled", restriction="none")
    fr = fit_design(design, lin)
    draws = bootstrap_design(design, B, seed, workers=workers).coefs[:, 1]
    p = min(1.0, 2 * min(np.mean(draws <= 0), np.mean(draws >= 0)))
    return SlopeTestResult(split, float(fr.beta[1]), float(p), draws, fr)
