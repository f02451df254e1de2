"""Cumulative impacts of the forced climate signal on TFP, level paths and headline statistics.

For one coefficient vector and one scenario the cumulative impact in year
``t`` is the running sum over 1962..t of the response terms evaluated at
the weather anomalies (scenario minus the natural-only 1950-1972
climatology of the same GCM). The forced impact is the with-forcing path
minus the without-forcing path; it is linear in the coefficients and
antisymmetric in the two scenarios.
"""
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tfpacc.dataio import PRECIP_SCALE
from tfpacc.errors import DataValidationError, DomainError
from tfpacc.rng import substream

log = logging.getLogger(__name__)

FIRST_YEAR = 1961  # impact paths are zero here by construction
LAST_YEAR = 2020
PROJECT_WINDOW = (2006, 2015)


def pct(x):
    """Log points to percent change."""
    return 100.0 * np.expm1(x)


# ---------------------------------------------------------------- anomalies

def scenario_anomalies(ss):
    """Per GCM, anomaly frames for both scenarios against the natural-only baseline.

    Returns ``{gcm: {"with": df, "without": df}}`` with columns country, year
    and one anomaly column per weather variable (degC or mm).
    """
    out = {}
    for g in ss.gcms:
        m = ss.members[g]
        if m.baseline is None or m.baseline.empty:
            raise DataValidationError(f"{g}: missing baseline climatology")
        base = m.baseline.set_index("country")
        res = {}
        for name, frame in (("with", m.with_acc), ("without", m.without_acc)):
            vars_ = [c for c in frame.columns if c not in ("country", "year") and c in base.columns]
            a = frame[["country", "year"]].copy()
            missing = sorted(set(frame["country"]) - set(base.index))
            if missing:
                raise DataValidationError(f"{g}: no baseline for {missing}")
            b = base.loc[frame["country"], vars_].to_numpy()
            a[vars_] = frame[vars_].to_numpy() - b
            res[name] = a
        out[g] = res
    return out


def term_values(anom, term, tvar="tmean"):
    """Anomaly regressor for ``term`` (dT, dT2, dT3, dP, dP2, dP3)."""
    var, scale = (tvar, 1.0) if term.startswith("dT") else ("precip", PRECIP_SCALE)
    power = int(term[2:]) if len(term) > 2 else 1
    return (np.asarray(anom[var], dtype=float) / scale) ** power


def cumulative_impact(beta, anom, terms, tvar="tmean", first=FIRST_YEAR + 1):
    """Running sum over ``first..t`` of the response terms at the anomalies of one country.

    ``anom`` has columns year and weather anomalies for a single country;
    ``beta`` is aligned with ``terms``. Years before ``first`` get 0.
    Returns a Series indexed by year.
    """
    a = anom.sort_values("year")
    years = a["year"].to_numpy(dtype=int)
    contrib = sum(float(b) * term_values(a, t, tvar) for b, t in zip(beta, terms))
    contrib = np.where(years >= first, contrib, 0.0)
    return pd.Series(np.cumsum(contrib), index=years, name="impact")


def _term_stack(frame, countries, years, terms, tvar):
    f = frame.set_index(["country", "year"])
    idx = pd.MultiIndex.from_product([countries, years], names=["country", "year"])
    missing = idx.difference(f.index)
    if len(missing):
        raise DataValidationError(f"scenario lacks {len(missing)} country-years, e.g. {list(missing[:3])}")
    f = f.loc[idx].reset_index()
    Z = np.stack([term_values(f, t, tvar) for t in terms], axis=-1)
    return Z.reshape(len(countries), len(years), len(terms))


def _split_names(names):
    """Base terms and group count from coefficient names (``dT`` or ``dT@g1``)."""
    base, groups = [], set()
    for n in names:
        t, _, g = n.partition("@g")
        if t not in base:
            base.append(t)
        groups.add(int(g) if g else -1)
    return base, (0 if groups == {-1} else len(groups))


def country_coefficients(coefs, names, countries, groups=None):
    """(B, C, K) per-country coefficients; latitude-group specs pick each country's group."""
    coefs = np.atleast_2d(np.asarray(coefs, dtype=float))
    base, ng = _split_names(names)
    K = len(base)
    if ng == 0:
        return np.repeat(coefs[:, None, :], len(countries), axis=1), base
    if not groups:
        raise DataValidationError("group-specific coefficients need the country->group map")
    out = np.empty((coefs.shape[0], len(countries), K))
    for i, c in enumerate(countries):
        if c not in groups:
            raise DataValidationError(f"no latitude group for {c}")
        g = groups[c]
        out[:, i, :] = coefs[:, g * K:(g + 1) * K]
    return out, base


# ---------------------------------------------------------------- ensemble

@dataclass
class ImpactEnsemble:
    """Forced cumulative impacts (log points) for ``n`` (draw, GCM) pairs.

    ``impacts`` has shape (n, countries, years); the first year is 1961 with
    impact 0.
    """

    countries: list
    years: np.ndarray
    draw_ids: np.ndarray
    gcms: list  # gcm of each member
    impacts: np.ndarray
    seed: int
    terms: list = field(default_factory=list)

    @property
    def n(self):
        return self.impacts.shape[0]

    def country_frame(self):
        """Country summary: mean and percentile bounds per year."""
        m = self.impacts
        rows = {"country": np.repeat(self.countries, len(self.years)),
                "year": np.tile(self.years, len(self.countries)),
                "mean": m.mean(axis=0).ravel()}
        for q in (2.5, 5, 95, 97.5):
            rows[f"q{q:g}"] = np.percentile(m, q, axis=0).ravel()
        return pd.DataFrame(rows)


def ensemble_impacts(be, ss, n=2000, seed=0, tvar=None, countries=None, years=(FIRST_YEAR, LAST_YEAR),
                     chunk=250):
    """Forced impact paths for ``n`` (bootstrap draw, GCM) pairs drawn uniformly with replacement.

    ``be`` is a BootstrapEnsemble (or any object with ``coefs``, ``names``,
    ``groups`` and optionally ``spec``). Draw and GCM indices are sampled
    independently from ``substream(seed, "ensemble")``.
    """
    if be.coefs.shape[0] == 0 or len(ss) == 0:
        raise DataValidationError("empty coefficient ensemble or scenario set")
    spec = getattr(be, "spec", None)
    tvar = tvar or (spec.tvar if spec is not None else "tmean")
    gcms = ss.gcms
    anoms = scenario_anomalies(ss)
    if countries is None:
        countries = sorted(set.intersection(*[set(ss.members[g].with_acc["country"]) for g in gcms]))
        if be.groups:
            dropped = [c for c in countries if c not in be.groups]
            if dropped:
                log.info("ensemble: no latitude group for %s, skipped", dropped)
            countries = [c for c in countries if c in be.groups]
    yrs = np.arange(years[0], years[1] + 1)
    Bc, base = country_coefficients(be.coefs, be.names, countries, be.groups)
    D = np.empty((len(gcms), len(countries), len(yrs), len(base)))
    live = yrs > FIRST_YEAR
    for k, g in enumerate(gcms):
        diff = np.zeros(D.shape[1:])
        diff[:, live] = (_term_stack(anoms[g]["with"], countries, yrs[live], base, tvar)
                         - _term_stack(anoms[g]["without"], countries, yrs[live], base, tvar))
        D[k] = np.cumsum(diff, axis=1)
    rng = substream(seed, "ensemble")
    bidx = rng.integers(0, Bc.shape[0], size=n)
    gidx = rng.integers(0, len(gcms), size=n)
    out = np.empty((n, len(countries), len(yrs)))
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        out[sl] = np.einsum("mcyk,mck->mcy", D[gidx[sl]], Bc[bidx[sl]])
    return ImpactEnsemble(list(countries), yrs, bidx, [gcms[i] for i in gidx], out, seed, base)


# ---------------------------------------------------------------- aggregation

def _unit_weights(meta, countries):
    m = meta.set_index("country")
    missing = [c for c in countries if c not in m.index]
    if missing:
        raise DataValidationError(f"no metadata for {missing}")
    return m.loc[countries, "revenue_weight"].to_numpy(dtype=float), m.loc[countries, "region"].to_numpy()


def aggregate_regions(impacts, countries, meta, include_global=True):
    """Revenue-weighted means of country impacts (log points) along axis -2.

    ``impacts`` is (..., countries, years). Returns ``{unit: (..., years)}``
    for ``global`` and each region present.
    """
    impacts = np.asarray(impacts, dtype=float)
    w, reg = _unit_weights(meta, list(countries))
    units = {}
    if include_global:
        units["global"] = np.ones(len(countries), bool)
    for r in sorted(set(reg)):
        units[r] = reg == r
    out = {}
    for u, sel in units.items():
        ws = w[sel]
        if not ws.sum() > 0:
            raise DomainError(f"zero total revenue weight in {u}")
        out[u] = np.einsum("...cy,c->...y", impacts[..., sel, :], ws / ws.sum())
    return out


# ---------------------------------------------------------------- levels

def project_growth(growth, value="dln_tfp", window=PROJECT_WINDOW, last=LAST_YEAR):
    """Append growth for ``window[1]+1..last`` at each country's mean over ``window``."""
    rows = [growth[["country", "year", value]]]
    for c, g in growth.groupby("country", sort=True):
        sel = g[(g["year"] >= window[0]) & (g["year"] <= window[1])]
        if sel.empty:
            raise DataValidationError(f"{c}: no growth observations in {window}")
        if len(sel) < window[1] - window[0] + 1:
            log.info("%s: projection uses %d years of history", c, len(sel))
        fut = np.arange(window[1] + 1, last + 1)
        rows.append(pd.DataFrame({"country": c, "year": fut, value: sel[value].mean()}))
    return pd.concat(rows, ignore_index=True).sort_values(["country", "year"], ignore_index=True)


def log_level_paths(growth, countries, years, value="dln_tfp"):
    """(C, Y) cumulative log growth since ``years[0]`` (0 there and before a country's first data)."""
    g = growth.pivot(index="country", columns="year", values=value).reindex(index=countries,
                                                                           columns=years)
    arr = g.to_numpy(dtype=float)
    arr[:, 0] = 0.0
    return np.cumsum(np.nan_to_num(arr), axis=1), ~np.isnan(arr)


def aggregate_growth(growth, countries, years, meta, value="dln_tfp"):
    """Revenue-weighted mean growth per unit and year over countries observed that year."""
    g = growth.pivot(index="country", columns="year", values=value).reindex(index=countries,
                                                                           columns=years)
    arr = g.to_numpy(dtype=float)
    w, reg = _unit_weights(meta, list(countries))
    units = {"global": np.ones(len(countries), bool)}
    for r in sorted(set(reg)):
        units[r] = reg == r
    out = {}
    for u, sel in units.items():
        a = arr[sel]
        ww = np.where(np.isnan(a), 0.0, w[sel][:, None])
        tot = ww.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[u] = np.where(tot > 0, (ww * np.nan_to_num(a)).sum(axis=0) / tot, 0.0)
    return out


def level_path(log_growth, acc, years, base_year=FIRST_YEAR + 1):
    """Observed and counterfactual levels normalized to 100 at the observed ``base_year`` level.

    ``log_growth`` is the per-year growth (Y,), zero in the first year;
    ``acc`` is (..., Y). Counterfactual: ``exp(sum(growth) - acc)``.
    """
    S = np.cumsum(log_growth)
    k = int(np.searchsorted(years, base_year))
    obs = 100.0 * np.exp(S - S[k])
    cf = 100.0 * np.exp(S - S[k] - np.asarray(acc))
    return obs, cf


@dataclass
class LevelSet:
    years: np.ndarray
    observed: dict  # unit -> (Y,)
    counterfactual: dict  # unit -> (n, Y)
    impacts: dict  # unit -> (n, Y) log points

    def frame(self):
        rows = []
        for u in self.observed:
            cf = self.counterfactual[u]
            rows.append(pd.DataFrame({
                "unit": u, "year": self.years, "observed": self.observed[u],
                "cf_mean": cf.mean(axis=0), "cf_q5": np.percentile(cf, 5, axis=0),
                "cf_q95": np.percentile(cf, 95, axis=0),
                "impact_mean": self.impacts[u].mean(axis=0),
                "impact_q5": np.percentile(self.impacts[u], 5, axis=0),
                "impact_q95": np.percentile(self.impacts[u], 95, axis=0),
            }))
        return pd.concat(rows, ignore_index=True)


def project_and_level(growth, ie, meta, value="dln_tfp", countries_too=False):
    """Aggregate impacts and level paths (observed through 2015, projected to 2020).

    Growth in 2016-2020 is each country's 2006-2015 mean. Aggregates use
    revenue-weighted mean log impacts, exponentiated afterwards.
    """
    proj = project_growth(growth, value, last=int(ie.years[-1]))
    agg_imp = aggregate_regions(ie.impacts, ie.countries, meta)
    agg_g = aggregate_growth(proj, ie.countries, ie.years, meta, value)
    obs, cf, imp = {}, {}, {}
    for u, a in agg_imp.items():
        gr = agg_g[u].copy()
        gr[0] = 0.0
        obs[u], cf[u] = level_path(gr, a, ie.years)
        imp[u] = a
    if countries_too:
        S, _ = log_level_paths(proj, ie.countries, ie.years, value)
        gr = np.diff(S, axis=1, prepend=0.0)
        for i, c in enumerate(ie.countries):
            obs[c], cf[c] = level_path(gr[i], ie.impacts[:, i, :], ie.years)
            imp[c] = ie.impacts[:, i, :]
    return LevelSet(ie.years, obs, cf, imp)


# ---------------------------------------------------------------- years lost

def crossing_year(years, path, target):
    """First year the path reaches ``target``, linearly interpolated; inf if never."""
    path = np.asarray(path, dtype=float)
    years = np.asarray(years, dtype=float)
    hit = np.flatnonzero(path >= target)
    if not hit.size:
        return math.inf
    k = hit[0]
    if k == 0:
        return float(years[0])
    if hit.size < len(path) - k or np.any(np.diff(path[k - 1:]) < 0):
        log.info("years_lost: path not monotone after the crossing; earliest crossing used")
    a, b = path[k - 1], path[k]
    return float(years[k - 1] + (target - a) / (b - a) * (years[k] - years[k - 1]))


def years_lost(observed_end, cf_path, years, end_year=LAST_YEAR):
    """``end_year`` minus the year the counterfactual first reaches the observed end level."""
    y = crossing_year(years, cf_path, observed_end)
    return end_year - y if math.isfinite(y) else math.inf


def format_years(v, span=LAST_YEAR - FIRST_YEAR - 1):
    return f">{span} years" if not math.isfinite(v) else float(v)


# ---------------------------------------------------------------- summary / writers

def _terminal_stats(x):
    x = np.asarray(x, dtype=float)
    d = {"mean_log": float(x.mean()), "mean_pct": float(pct(x.mean())), "sd_log": float(x.std(ddof=1))
         if x.size > 1 else 0.0}
    for lv in (90, 95):
        a = (100 - lv) / 2
        lo, hi = np.percentile(x, [a, 100 - a])
        d[f"ci{lv}_log"] = [float(lo), float(hi)]
        d[f"ci{lv}_pct"] = [float(pct(lo)), float(pct(hi))]
    return d


def summarize(ie, levels, end_year=LAST_YEAR):
    k = int(np.searchsorted(ie.years, end_year))
    out = {"n": int(ie.n), "seed": int(ie.seed), "gcms": sorted(set(ie.gcms)), "terms": list(ie.terms),
           "end_year": int(end_year), "units": {}}
    for u, imp in levels.impacts.items():
        if u in ie.countries:
            continue
        d = _terminal_stats(imp[:, k])
        obs_end = levels.observed[u][k]
        mean_cf = levels.counterfactual[u].mean(axis=0)
        d["years_lost_mean_path"] = format_years(years_lost(obs_end, mean_cf, ie.years, end_year))
        member = np.array([years_lost(obs_end, p, ie.years, end_year) for p in levels.counterfactual[u]])
        fin = np.where(np.isfinite(member), member, 1e9)
        lo, hi = np.percentile(fin, [5, 95])
        d["years_lost_ci90"] = [format_years(lo if lo < 1e9 else math.inf),
                                format_years(hi if hi < 1e9 else math.inf)]
        d["years_lost_no_crossing_share"] = float((~np.isfinite(member)).mean())
        out["units"][u] = d
    out["headline"] = out["units"].get("global")
    return out


def write_outputs(out_dir, ie, levels, summary, all_members=False):
    """impacts.csv, country_impacts.csv, levels.csv and summary.json."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    gcm = np.asarray(ie.gcms, dtype=object)
    units = [u for u in levels.impacts if u not in ie.countries]
    series = [(u, levels.impacts[u]) for u in units]
    if all_members:
        series += [(c, ie.impacts[:, i, :]) for i, c in enumerate(ie.countries)]
    ny = len(ie.years)
    for u, arr in series:
        frames.append(pd.DataFrame({
            "member_id": np.repeat(np.arange(ie.n), ny),
            "draw_id": np.repeat(ie.draw_ids, ny),
            "gcm": np.repeat(gcm, ny),
            "unit": u,
            "year": np.tile(ie.years, ie.n),
            "impact": arr.ravel(),
        }))
    pd.concat(frames, ignore_index=True).to_csv(out_dir / "impacts.csv", index=False, float_format="%.17g")
    ie.country_frame().to_csv(out_dir / "country_impacts.csv", index=False, float_format="%.17g")
    levels.frame().to_csv(out_dir / "levels.csv", index=False, float_format="%.17g")
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
