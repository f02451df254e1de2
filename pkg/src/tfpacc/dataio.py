"""Tabular inputs: TFP index panel, country metadata, seasonal weather panel.

Panels are plain DataFrames in long format. ``RegTable`` is the joined
regression table consumed by ``econ``.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tfpacc.errors import DataValidationError, DomainError, ParseError

log = logging.getLogger(__name__)

# FAO regional groupings used for blocks and aggregation
REGIONS = (
    "africa",
    "asia",
    "europe_central_asia",
    "lac",
    "near_east",
    "north_america",
    "oceania",
)
WEATHER_VARS = ("tmean", "tmin", "tmax", "precip")
# precipitation regressors are carried in units of 1,000 mm
PRECIP_SCALE = 1000.0


def _read_rows(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            yield lineno, dict(zip(header, (x.strip() for x in row)))


def _parse_int(path, lineno, s, what):
    try:
        return int(s)
    except ValueError:
        raise ParseError(path, lineno, f"bad {what} {s!r}") from None


def _parse_float(path, lineno, s, what):
    try:
        v = float(s)
    except ValueError:
        raise ParseError(path, lineno, f"bad {what} {s!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, lineno, f"non-finite {what}")
    return v


def load_index_panel(path, column="tfp_index", value_name="ln_tfp", years=(1961, 2015)):
    """Read ``country,year,<column>`` and return the log of the index.

    Raises ParseError (with line number) on malformed rows and DomainError on
    nonpositive index values or years outside ``years``.
    """
    records = {}
    for lineno, row in _read_rows(path, ("country", "year", column)):
        country = row["country"]
        if not country:
            raise ParseError(path, lineno, "empty country id")
        year = _parse_int(path, lineno, row["year"], "year")
        value = _parse_float(path, lineno, row[column], column)
        if value <= 0:
            raise DomainError(f"{path}:{lineno}: {column} must be positive, got {value}")
        if years is not None and not (years[0] <= year <= years[1]):
            raise DomainError(f"{path}:{lineno}: year {year} outside {years[0]}-{years[1]}")
        if (country, year) in records:
            raise DataValidationError(f"{path}:{lineno}: duplicate record ({country}, {year})")
        records[(country, year)] = math.log(value)
    df = pd.DataFrame(
        [(c, y, v) for (c, y), v in records.items()], columns=["country", "year", value_name]
    )
    df = df.sort_values(["country", "year"], ignore_index=True)
    log.info("%s: %d rows, %d countries", path, len(df), df["country"].nunique())
    return df


def load_tfp_panel(path, years=(1961, 2015)):
    return load_index_panel(path, "tfp_index", "ln_tfp", years)


def load_output_panel(path, years=(1961, 2015)):
    return load_index_panel(path, "output_index", "ln_output", years)


def first_difference(panel, value="ln_tfp", out=None):
    """Year-over-year differences within country; gaps restart the differencing."""
    out = out or "d" + value
    p = panel.sort_values(["country", "year"])
    prev_year = p.groupby("country")["year"].shift(1)
    prev_val = p.groupby("country")[value].shift(1)
    ok = (p["year"] - prev_year) == 1
    g = pd.DataFrame({
        "country": p["country"][ok].to_numpy(),
        "year": p["year"][ok].to_numpy().astype(int),
        out: (p[value][ok] - prev_val[ok]).to_numpy(),
    })
    return g.reset_index(drop=True)


def load_meta(path, regions=REGIONS):
    rows = []
    seen = set()
    for lineno, row in _read_rows(path, ("country", "region", "latitude", "revenue_weight")):
        c = row["country"]
        if c in seen:
            raise DataValidationError(f"{path}:{lineno}: duplicate country {c}")
        seen.add(c)
        lat = _parse_float(path, lineno, row["latitude"], "latitude")
        w = _parse_float(path, lineno, row["revenue_weight"], "revenue_weight")
        if not -90 <= lat <= 90:
            raise DomainError(f"{path}:{lineno}: latitude {lat} out of range")
        if w < 0:
            raise DomainError(f"{path}:{lineno}: negative revenue weight")
        if regions is not None and row["region"] not in regions:
            raise DataValidationError(f"{path}:{lineno}: unknown region {row['region']!r}")
        rows.append((c, row["region"], lat, w))
    meta = pd.DataFrame(rows, columns=["country", "region", "latitude", "revenue_weight"])
    return validate_meta(meta, regions)


def validate_meta(meta, regions=REGIONS):
    """Check region tokens and normalize revenue weights to sum to one."""
    meta = meta.copy()
    if meta["country"].duplicated().any():
        raise DataValidationError("duplicate countries in metadata")
    if regions is not None:
        bad = sorted(set(meta["region"]) - set(regions))
        if bad:
            raise DataValidationError(f"unknown regions {bad}")
    total = meta["revenue_weight"].sum()
    if not total > 0:
        raise DomainError("revenue weights sum to zero")
    meta["revenue_weight"] = meta["revenue_weight"] / total
    return meta.reset_index(drop=True)


def load_weather_panel(path):
    """Seasonal weather: country,year plus any of tmean,tmin,tmax (degC), precip (mm)."""
    df = pd.read_csv(path, dtype={"country": str}, float_precision="round_trip")
    if not {"country", "year"} <= set(df.columns):
        raise DataValidationError(f"{path}: needs country and year columns")
    have = [v for v in WEATHER_VARS if v in df.columns]
    if not have:
        raise DataValidationError(f"{path}: no weather columns")
    df["country"] = df["country"].astype(str)
    df["year"] = df["year"].astype(int)
    if df.duplicated(["country", "year"]).any():
        raise DataValidationError(f"{path}: duplicate (country, year) rows")
    return df[["country", "year"] + have]


def write_index_panel(panel, path, value="ln_tfp", column="tfp_index"):
    out = pd.DataFrame({"country": panel["country"], "year": panel["year"],
                        column: np.exp(panel[value])})
    out.to_csv(path, index=False, float_format="%.17g")


def write_meta(meta, path):
    meta[["country", "region", "latitude", "revenue_weight"]].to_csv(
        path, index=False, float_format="%.17g")


# ---------------------------------------------------------------- regression table

@dataclass
class RegTable:
    """Joined country-year regression table.

    ``data`` columns: country, year, region, latitude, lat_group, rev_weight,
    growth columns (dln_tfp and/or dln_output), level columns T, T_prev
    (degC) and, when precipitation is included, P, P_prev (mm), then the
    differenced regressors dT, dT2[, dT3][, dP, dP2[, dP3]]. Precipitation
    differences are in 1,000 mm.
    """

    data: pd.DataFrame
    tvar: str = "tmean"
    precip: bool = True
    form: str = "quadratic"
    drop_log: list = field(default_factory=list)

    @property
    def weather_terms(self):
        return weather_terms(self.precip, self.form)

    def __len__(self):
        return len(self.data)


def weather_terms(precip=True, form="quadratic"):
    degree = {"linear": 1, "quadratic": 2, "cubic": 3}[form]
    terms = ["dT"] + [f"dT{k}" for k in range(2, degree + 1)]
    if precip:
        terms += ["dP"] + [f"dP{k}" for k in range(2, degree + 1)]
    return terms


def latitude_terciles(meta, countries, signed=False):
    """Map country -> 0/1/2 by equal-size latitude groups (ties by country id).

    Group 0 holds the lowest absolute (or signed) latitudes.
    """
    m = meta.set_index("country").loc[sorted(countries)]
    key = m["latitude"] if signed else m["latitude"].abs()
    order = sorted(m.index, key=lambda c: (key[c], c))
    groups = {}
    for g, chunk in enumerate(np.array_split(np.array(order, dtype=object), 3)):
        for c in chunk:
            groups[c] = g
    return groups


def assemble_panel(growth, weather, meta, spec=None, *, tvar=None, precip=None, form=None,
                   min_coverage=0.9, signed_latitude=False):
    """Inner-join growth, seasonal weather and metadata into a RegTable.

    Weather must provide levels for year t and t-1 of every growth row. Rows
    lacking either, or lacking metadata, are dropped and logged. If the share
    of growth rows with complete weather falls below ``min_coverage`` a
    DataValidationError lists the missing (country, year) pairs.
    """
    tvar = tvar or (spec.tvar if spec else "tmean")
    precip = precip if precip is not None else (spec.precip == "include" if spec else True)
    form = form or (spec.form if spec else "quadratic")
    if tvar not in weather.columns:
        raise DataValidationError(f"weather panel lacks {tvar}")
    if precip and "precip" not in weather.columns:
        raise DataValidationError("weather panel lacks precip")

    growth_cols = [c for c in ("dln_tfp", "dln_output") if c in growth.columns]
    if not growth_cols:
        raise DataValidationError("growth panel needs dln_tfp or dln_output")
    drop_log = []

    known = set(meta["country"])
    nometa = ~growth["country"].isin(known)
    for c, y in growth.loc[nometa, ["country", "year"]].itertuples(index=False):
        drop_log.append({"country": c, "year": int(y), "reason": "no metadata"})
    g = growth.loc[~nometa]

    wcols = [tvar] + (["precip"] if precip else [])
    w = weather[["country", "year"] + wcols].dropna()
    cur = w.rename(columns={tvar: "T", "precip": "P"})
    prev = cur.assign(year=cur["year"] + 1).rename(columns={"T": "T_prev", "P": "P_prev"})
    df = g.merge(cur, on=["country", "year"], how="left").merge(prev, on=["country", "year"], how="left")
    level_cols = ["T", "T_prev"] + (["P", "P_prev"] if precip else [])
    bad = df[level_cols].isna().any(axis=1)
    missing_pairs = set()
    for row in df.loc[bad].itertuples(index=False):
        drop_log.append({"country": row.country, "year": int(row.year), "reason": "missing weather"})
        if pd.isna(row.T) or (precip and pd.isna(row.P)):
            missing_pairs.add((row.country, int(row.year)))
        if pd.isna(row.T_prev) or (precip and pd.isna(row.P_prev)):
            missing_pairs.add((row.country, int(row.year) - 1))
    coverage = 1.0 - bad.sum() / max(len(g), 1)
    if coverage < min_coverage:
        raise DataValidationError(
            f"weather coverage {coverage:.3f} below {min_coverage}; missing (country, year): "
            f"{sorted(missing_pairs)}")
    if bad.any():
        log.info("assemble_panel: dropped %d rows for missing weather", int(bad.sum()))
    df = df.loc[~bad].copy()

    df = df.merge(meta[["country", "region", "latitude", "revenue_weight"]], on="country", how="left")
    df = df.rename(columns={"revenue_weight": "rev_weight"})
    groups = latitude_terciles(meta, df["country"].unique(), signed=signed_latitude)
    df["lat_group"] = df["country"].map(groups).astype(int)

    degree = {"linear": 1, "quadratic": 2, "cubic": 3}[form]
    df["dT"] = df["T"] - df["T_prev"]
    for k in range(2, max(degree, 2) + 1):
        df[f"dT{k}"] = df["dT"] ** k
    if precip:
        df["dP"] = (df["P"] - df["P_prev"]) / PRECIP_SCALE
        for k in range(2, max(degree, 2) + 1):
            df[f"dP{k}"] = df["dP"] ** k
    df["year"] = df["year"].astype(int)
    df = df.sort_values(["country", "year"], ignore_index=True)
    cols = (["country", "year", "region", "latitude", "lat_group", "rev_weight"] + growth_cols
            + level_cols + [c for c in df.columns if c.startswith("dT") or c.startswith("dP")])
    return RegTable(df[cols], tvar=tvar, precip=precip, form=form, drop_log=drop_log)
