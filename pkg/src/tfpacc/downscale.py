"""BCSD downscaling of climate-model fields and assembly of with/without-forcing scenarios.

Bias correction is empirical quantile mapping per coarse cell and calendar
month; spatial disaggregation interpolates anomalies (differences for
temperature, ratios for precipitation) to the fine grid and adds back the
fine-grid observed climatology.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from tfpacc.errors import DataValidationError, DomainError
from tfpacc.gridops import (
    GridField,
    GridSeries,
    bilinear_array,
    coarsen_area_weighted,
    read_grid,
    zonal_aggregate,
)
from tfpacc.season import seasonal_aggregate

log = logging.getLogger(__name__)

PRECIP_FLOOR = 0.01  # mm/month, denominator floor for ratio anomalies
RATIO_CAP = 5.0
EXPERIMENTS = ("hist-nat", "historical", "ssp245")
KIND = {"tmean": "additive", "tmin": "additive", "tmax": "additive", "precip": "ratio"}


# ---------------------------------------------------------------- quantile mapping

@dataclass
class QmapTable:
    """Sorted training values per calendar month and coarse cell.

    ``model_q`` and ``obs_q`` have shape (12, nlat, nlon, n_years).
    """

    spec: object
    model_q: np.ndarray
    obs_q: np.ndarray
    kind: str
    years: tuple


def _monthly_stack(series, years):
    s = series.select_years(*years)
    n = len(s)
    if n != 12 * (years[1] - years[0] + 1) or tuple(s.start) != (years[0], 1):
        raise DataValidationError(f"series does not cover whole years {years}")
    return s.values.reshape(n // 12, 12, *s.spec.shape)


def fit_quantile_map(model, obs_coarse, years=(1961, 2014), kind="additive"):
    """Pair the sorted model and observed training values cell by cell, month by month."""
    if model.spec != obs_coarse.spec:
        raise DataValidationError("model and observations must share the coarse grid")
    if kind not in ("additive", "ratio"):
        raise ValueError(f"unknown kind {kind!r}")
    m = _monthly_stack(model, years)
    o = _monthly_stack(obs_coarse, years)
    if m.shape[0] < 2:
        raise DataValidationError("quantile mapping needs at least two training values")
    mq = np.sort(np.moveaxis(m, 0, -1), axis=-1)
    oq = np.sort(np.moveaxis(o, 0, -1), axis=-1)
    bad = np.isnan(mq).any(axis=-1) | np.isnan(oq).any(axis=-1)
    mq[bad] = np.nan
    oq[bad] = np.nan
    return QmapTable(model.spec, mq, oq, kind, tuple(years))


def map_values(model_q, obs_q, x, kind="additive"):
    """Transfer function defined by one pair of sorted quantile arrays.

    Piecewise linear between the pairs. Tied model quantiles collapse to the
    median of their observed partners; a fully degenerate table maps every
    input to the observed median. Beyond the training range the nearest
    endpoint pair sets a constant offset (additive) or ratio.
    """
    x = np.asarray(x, dtype=float)
    mq = np.asarray(model_q, dtype=float)
    oq = np.asarray(obs_q, dtype=float)
    if np.isnan(mq).any():
        return np.full(x.shape, np.nan)
    u, inv = np.unique(mq, return_inverse=True)
    if len(u) < len(mq):
        ov = np.array([np.median(oq[inv == j]) for j in range(len(u))])
    else:
        ov = oq
    if len(u) == 1:
        return np.full(x.shape, float(np.median(oq)))
    out = np.interp(x, u, ov)
    hi = x > u[-1]
    lo = x < u[0]
    if kind == "additive":
        out = np.where(hi, x + (ov[-1] - u[-1]), out)
        out = np.where(lo, x + (ov[0] - u[0]), out)
    else:
        out = np.where(hi, x * (ov[-1] / max(u[-1], PRECIP_FLOOR)), out)
        if u[0] > PRECIP_FLOOR:
            out = np.where(lo, np.maximum(x, 0.0) * (ov[0] / u[0]), out)
        else:
            out = np.where(lo, ov[0], out)
    return out


def apply_quantile_map(q, x, cell, month):
    """Corrected value(s) of ``x`` at coarse ``cell = (i, j)`` for calendar ``month`` (1-12)."""
    i, j = cell
    return map_values(q.model_q[month - 1, i, j], q.obs_q[month - 1, i, j], x, q.kind)


def correct_series(q, series):
    """Apply the quantile map to every slice of a coarse monthly series."""
    if series.spec != q.spec:
        raise DataValidationError("series grid differs from the quantile-map grid")
    out = np.empty_like(series.values)
    months = np.array([m for _, m in series.stamps])
    for m in range(1, 13):
        idx = np.flatnonzero(months == m)
        if not idx.size:
            continue
        for i in range(q.spec.nlat):
            for j in range(q.spec.nlon):
                out[idx, i, j] = apply_quantile_map(q, series.values[idx, i, j], (i, j), m)
    return GridSeries(series.spec, out, series.variable, series.start)


# ---------------------------------------------------------------- disaggregation

def monthly_climatology(series, years):
    """(12, nlat, nlon) mean of each calendar month over ``years``."""
    return np.nanmean(_monthly_stack(series, years), axis=0)


def _ratio_anomaly(F, C, floor, cap):
    F = np.maximum(F, 0.0)
    r = F / np.maximum(C, floor)
    r = np.where(F == C, 1.0, r)
    hits = int(np.count_nonzero(r > cap))
    return np.minimum(r, cap), hits


def spatial_disaggregate(bc_coarse, clim_coarse, clim_fine, kind="additive", cap=RATIO_CAP,
                         floor=PRECIP_FLOOR):
    """Fine-grid field from a bias-corrected coarse field.

    additive: ``clim_fine + interp(F - clim_coarse)``
    ratio:    ``clim_fine * interp(min(F / max(clim_coarse, floor), cap))``
    """
    if bc_coarse.spec != clim_coarse.spec:
        raise DataValidationError("coarse field and coarse climatology are on different grids")
    F, C = bc_coarse.values, clim_coarse.values
    if kind == "additive":
        anom = F - C
    elif kind == "ratio":
        anom, hits = _ratio_anomaly(F, C, floor, cap)
        if hits:
            log.info("spatial_disaggregate: %d ratio anomalies capped at %g", hits, cap)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    fine = bilinear_array(anom, bc_coarse.spec, clim_fine.spec)
    if kind == "additive":
        out = fine + clim_fine.values
    else:
        out = fine * np.maximum(clim_fine.values, 0.0)
    return GridField(clim_fine.spec, out, bc_coarse.variable, bc_coarse.stamp)


def disaggregate_series(bc, clim_coarse, clim_fine, fine_spec, kind="additive", cap=RATIO_CAP,
                        floor=PRECIP_FLOOR):
    """Vectorized ``spatial_disaggregate`` over a monthly series; climatologies are (12, ...)."""
    months = np.array([m for _, m in bc.stamps]) - 1
    C = clim_coarse[months]
    if kind == "additive":
        anom = bc.values - C
    else:
        anom, hits = _ratio_anomaly(bc.values, C, floor, cap)
        if hits:
            log.info("disaggregate: %d ratio anomalies capped at %g", hits, cap)
    fine = bilinear_array(anom, bc.spec, fine_spec)
    if kind == "additive":
        out = fine + clim_fine[months]
    else:
        out = fine * np.maximum(clim_fine[months], 0.0)
    return GridSeries(fine_spec, out, bc.variable, bc.start)


def bcsd(experiments, obs_fine, coarse_spec, train=(1961, 2014), reference="historical", **kw):
    """Bias-correct and downscale every experiment of one GCM variable.

    ``experiments`` maps experiment name -> coarse GridSeries. The quantile
    map is trained on ``reference`` against the coarsened observations over
    ``train`` and applied to all experiments.
    """
    variable = obs_fine.variable
    kind = KIND.get(variable, "additive")
    obs_coarse = coarsen_area_weighted(obs_fine.select_years(*train), coarse_spec)
    q = fit_quantile_map(experiments[reference], obs_coarse, train, kind)
    clim_c = monthly_climatology(obs_coarse, train)
    clim_f = monthly_climatology(obs_fine, train)
    out = {}
    for name, series in experiments.items():
        bc = correct_series(q, series)
        out[name] = disaggregate_series(bc, clim_c, clim_f, obs_fine.spec, kind, **kw)
    return out


# ---------------------------------------------------------------- scenarios

@dataclass
class ScenarioMember:
    with_acc: pd.DataFrame
    without_acc: pd.DataFrame
    baseline: pd.DataFrame  # country + weather columns, mean of the without-forcing baseline window


@dataclass
class ScenarioSet:
    members: dict = field(default_factory=dict)

    @property
    def gcms(self):
        return sorted(self.members)

    def __len__(self):
        return len(self.members)

    def frame(self):
        rows = []
        for g in self.gcms:
            m = self.members[g]
            rows.append(m.with_acc.assign(gcm=g, scenario="with"))
            rows.append(m.without_acc.assign(gcm=g, scenario="without"))
            rows.append(m.baseline.assign(gcm=g, scenario="baseline", year=pd.NA))
        df = pd.concat(rows, ignore_index=True)
        lead = ["gcm", "scenario", "country", "year"]
        return df[lead + [c for c in df.columns if c not in lead]]

    def to_csv(self, path):
        self.frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, dtype={"country": str, "gcm": str}, float_precision="round_trip")
        return cls.from_frame(df)

    @classmethod
    def from_frame(cls, df):
        members = {}
        wcols = [c for c in df.columns if c not in ("gcm", "scenario", "country", "year")]
        for g, grp in df.groupby("gcm", sort=True):
            parts = {}
            for s in ("with", "without", "baseline"):
                p = grp[grp["scenario"] == s]
                if p.empty:
                    raise DataValidationError(f"scenario file lacks {s} rows for {g}")
                cols = ["country"] + ([] if s == "baseline" else ["year"]) + wcols
                p = p[cols].reset_index(drop=True)
                if s != "baseline":
                    p["year"] = p["year"].astype(int)
                parts[s] = p
            members[str(g)] = ScenarioMember(parts["with"], parts["without"], parts["baseline"])
        return cls(members)


def _country_seasonal(fields, weights, mask, season_map, window, countries):
    monthly = None
    for var, series in fields.items():
        tab, _ = zonal_aggregate(series, weights, mask, countries, name=var)
        monthly = tab if monthly is None else monthly.merge(tab, on=["country", "year", "month"])
    return seasonal_aggregate(monthly, season_map, window)


def assemble_scenarios(members, weights, mask, season_map, window="green", years=(1961, 2020),
                       baseline=(1950, 1972), splice=2014, countries=None):
    """Country-level seasonal trajectories with and without anthropogenic forcing.

    ``members`` maps GCM id -> experiment -> variable -> fine monthly
    GridSeries. The with-forcing world is ``historical`` through ``splice``
    followed by ``ssp245``; the without-forcing world is ``hist-nat``. Both
    pass through the same zonal weights and season map as the observations.
    GCMs missing an experiment are dropped with a warning.
    """
    out = {}
    for gcm in sorted(members):
        exps = members[gcm]
        missing = [e for e in EXPERIMENTS if e not in exps]
        if missing:
            log.warning("assemble_scenarios: dropping %s, missing %s", gcm, missing)
            continue
        with_fields, without_fields = {}, {}
        for var in exps["hist-nat"]:
            hist = exps["historical"][var]
            ssp = exps["ssp245"][var]
            first = hist.stamps[0][0]
            with_fields[var] = GridSeries.concat([hist.select_years(first, splice),
                                                  ssp.select_years(splice + 1, ssp.stamps[-1][0])])
            without_fields[var] = exps["hist-nat"][var]
        w = _country_seasonal(with_fields, weights, mask, season_map, window, countries)
        wo = _country_seasonal(without_fields, weights, mask, season_map, window, countries)
        base_years = wo[(wo["year"] >= baseline[0]) & (wo["year"] <= baseline[1])]
        if base_years.empty:
            raise DomainError(f"{gcm}: no without-forcing years inside the baseline window {baseline}")
        got = (int(base_years["year"].min()), int(base_years["year"].max()))
        if got != tuple(baseline):
            log.info("%s: baseline window narrowed to %d-%d", gcm, *got)
        base = base_years.drop(columns="year").groupby("country", sort=True).mean().reset_index()
        w = w[(w["year"] >= years[0]) & (w["year"] <= years[1])]
        wo = wo[(wo["year"] >= years[0]) & (wo["year"] <= years[1])]
        keys = w[["country", "year"]].merge(wo[["country", "year"]])
        w = keys.merge(w).sort_values(["country", "year"], ignore_index=True)
        wo = keys.merge(wo).sort_values(["country", "year"], ignore_index=True)
        out[gcm] = ScenarioMember(w, wo, base)
    if not out:
        raise DataValidationError("no complete GCM members")
    return ScenarioSet(out)


def load_manifest_members(manifest_path):
    """Read a scenario manifest: {"members": {gcm: {experiment: {variable: path}}}}.

    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    members = {}
    for gcm, exps in spec["members"].items():
        members[gcm] = {
            exp: {var: read_grid(root / p) for var, p in files.items()} for exp, files in exps.items()
        }
    return members


def downscale_members(gcm, obs, coarse_spec, train=(1961, 2014), **kw):
    """BCSD for every GCM, experiment and variable; ``gcm[g][exp][var]`` are coarse series."""
    out = {}
    for g in sorted(gcm):
        exps = gcm[g]
        out[g] = {e: {} for e in exps}
        variables = sorted(set.intersection(*[set(v) for v in exps.values()]))
        for var in variables:
            if var not in obs:
                log.warning("no observations for %s; variable skipped", var)
                continue
            res = bcsd({e: exps[e][var] for e in exps}, obs[var], coarse_spec, train, **kw)
            for e, s in res.items():
                out[g][e][var] = s
    return out
