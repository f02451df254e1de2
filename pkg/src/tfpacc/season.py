"""Green season from NDVI climatology and seasonal aggregation of monthly weather."""
import logging
import warnings

import numpy as np
import pandas as pd

from tfpacc.errors import DataValidationError
from tfpacc.gridops import GridField

log = logging.getLogger(__name__)

NBINS = 24
SMOOTH_BINS = 7  # 14 weeks of biweekly bins
_MONTH_DAYS = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])
_MONTH_END = np.cumsum(_MONTH_DAYS)


def bin_midpoint_days(nbins=NBINS):
    """Day of year (0-based, 365-day year) at the middle of each bin."""
    return (np.arange(nbins) + 0.5) * 365.0 / nbins


def bin_to_month(nbins=NBINS):
    """Calendar month (1-12) containing each bin's midpoint."""
    return np.searchsorted(_MONTH_END, bin_midpoint_days(nbins), side="right") + 1


def ndvi_climatology(series, window=SMOOTH_BINS):
    """Multi-year mean of biweekly NDVI, then a centered circular box filter.

    Parameters
    ----------
    series : array (n_years, 24, ...) or GridSeries of length n_years*24
    window : odd number of bins in the moving window

    Returns
    -------
    array (24, ...) ; cells with no data in a bin are NaN.
    """
    if hasattr(series, "spec"):
        if len(series) % NBINS:
            raise DataValidationError(f"NDVI series length {len(series)} is not a multiple of {NBINS}")
        values = series.values.reshape((-1, NBINS) + series.spec.shape)
    else:
        values = np.asarray(series, dtype=float)
    if values.ndim < 2 or values.shape[1] != NBINS:
        raise DataValidationError(f"expected {NBINS} biweekly bins per year")
    if window % 2 != 1:
        raise ValueError("smoothing window must be odd")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        clim = np.nanmean(values, axis=0)
    half = window // 2
    acc = np.zeros_like(clim)
    for k in range(-half, half + 1):
        acc += np.roll(clim, k, axis=0)
    return acc / window


def greenest_month_cell(clim):
    """Month of the NDVI maximum for each cell; ties go to the earliest month.

    ``clim`` is (24, ...). Cells with any missing bin yield 0 (no month).
    """
    clim = np.asarray(clim, dtype=float)
    months = bin_to_month(clim.shape[0])
    bad = np.isnan(clim).any(axis=0)
    idx = np.argmax(np.where(np.isnan(clim), -np.inf, clim), axis=0)
    out = months[idx]
    return np.where(bad, 0, out)


def country_green_month(cell_months, weights, mask, countries=None, donors=None):
    """Weighted mode of the cell months within each country.

    ``cell_months`` is an int array on the mask grid (0 = no NDVI). Countries
    without coverage copy the month of their donor (``donors[c]``); a country
    with neither raises DataValidationError.
    """
    if isinstance(cell_months, GridField):
        cell_months = cell_months.values
    cell_months = np.asarray(np.nan_to_num(cell_months), dtype=int)
    if cell_months.shape != mask.spec.shape or weights.spec != mask.spec:
        raise DataValidationError("cell months, weights and mask must share one grid")
    donors = donors or {}
    countries = list(mask.countries) if countries is None else list(countries)
    w = np.nan_to_num(weights.values, nan=0.0)
    result = {}
    uncovered = []
    for c in countries:
        if c not in mask.countries:
            uncovered.append(c)
            continue
        cells = (mask.codes == mask.countries.index(c)) & (cell_months > 0)
        if not cells.any():
            uncovered.append(c)
            continue
        tally = np.bincount(cell_months[cells], weights=w[cells], minlength=13)[1:]
        if tally.sum() <= 0:
            tally = np.bincount(cell_months[cells], minlength=13)[1:].astype(float)
        # argmax returns the first maximum -> earliest month
        result[c] = int(np.argmax(tally)) + 1
    for c in uncovered:
        d = donors.get(c)
        if d is None or d not in result:
            raise DataValidationError(f"no NDVI coverage for {c} and no usable donor")
        log.info("season: %s takes greenest month of donor %s", c, d)
        result[c] = result[d]
    return result


def write_season_map(season_map, path):
    pd.DataFrame(sorted(season_map.items()), columns=["country", "greenest_month"]).to_csv(
        path, index=False)


def read_season_map(path):
    df = pd.read_csv(path, dtype={"country": str})
    if not {"country", "greenest_month"} <= set(df.columns):
        raise DataValidationError(f"{path}: needs country,greenest_month")
    m = dict(zip(df["country"], df["greenest_month"].astype(int)))
    bad = {c: v for c, v in m.items() if not 1 <= v <= 12}
    if bad:
        raise DataValidationError(f"{path}: months outside 1-12: {bad}")
    return m


def season_months(center, year):
    """(year, month) pairs of the 5-month window centered on ``center`` in ``year``."""
    k = year * 12 + (center - 1) + np.arange(-2, 3)
    return list(zip((k // 12).tolist(), (k % 12 + 1).tolist()))


def seasonal_aggregate(monthly, season_map=None, window="green", mean_vars=("tmean", "tmin", "tmax"),
                       sum_vars=("precip",)):
    """Seasonal means (temperature) and sums (precipitation) by country-year.

    ``monthly`` has columns country, year, month and weather variables.
    Green window: the five months centered on the country's greenest month,
    labeled with the year of the center month and borrowing months from the
    adjacent years when the window wraps. Calendar window: January-December.
    Seasons with any missing month are dropped and logged.
    """
    mean_vars = [v for v in mean_vars if v in monthly.columns]
    sum_vars = [v for v in sum_vars if v in monthly.columns]
    cols = mean_vars + sum_vars
    if window not in ("green", "calendar"):
        raise ValueError(f"unknown window {window!r}")
    m = monthly[["country", "year", "month"] + cols].copy()
    m["k"] = m["year"] * 12 + m["month"] - 1
    frames = []
    dropped = 0
    for c, grp in m.groupby("country", sort=True):
        grp = grp.set_index("k").sort_index()
        if window == "green":
            if season_map is None or c not in season_map:
                raise DataValidationError(f"no greenest month for {c}")
            offsets = np.arange(-2, 3) + (season_map[c] - 1)
        else:
            offsets = np.arange(12)
        years = np.arange(grp["year"].min(), grp["year"].max() + 1)
        ks = years[:, None] * 12 + offsets[None, :]
        vals = grp[cols].reindex(ks.ravel()).to_numpy().reshape(len(years), len(offsets), len(cols))
        ok = ~np.isnan(vals).any(axis=(1, 2))
        dropped += int((~ok).sum())
        out = pd.DataFrame({"country": c, "year": years[ok]})
        for j, v in enumerate(cols):
            if v in mean_vars:
                out[v] = vals[ok, :, j].mean(axis=1)
            else:
                out[v] = vals[ok, :, j].sum(axis=1)
        frames.append(out)
    if dropped:
        log.info("seasonal_aggregate: dropped %d incomplete seasons", dropped)
    if not frames:
        return pd.DataFrame(columns=["country", "year"] + cols)
    return pd.concat(frames, ignore_index=True)
