"""Synthetic worlds with known parameters, and a dense dummy-variable oracle.

``generate_world`` builds every input the pipeline consumes: fine-grid
monthly weather, land-cover weights, biweekly NDVI with known peak months,
a country mask, metadata, a TFP index whose growth follows the two-way
fixed-effects equation with known coefficients, and coarse climate-model
fields for the natural-only and all-forcing experiments. ``write_world``
emits them in the native file formats together with a truth manifest.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from tfpacc.dataio import REGIONS, RegTable, assemble_panel, write_index_panel, write_meta
from tfpacc.downscale import ScenarioMember, ScenarioSet
from tfpacc.errors import RankDeficiencyError
from tfpacc.gridops import (
    CountryMask,
    GridField,
    GridSeries,
    GridSpec,
    coarsen_area_weighted,
    write_grid,
    zonal_aggregate,
)
from tfpacc.rng import substream
from tfpacc.season import (
    NBINS,
    bin_midpoint_days,
    country_green_month,
    greenest_month_cell,
    ndvi_climatology,
    seasonal_aggregate,
    write_season_map,
)

log = logging.getLogger(__name__)

ANCHOR_COUNTRIES = ("CHN", "USA", "IND", "BRA")
_OTHER_IDS = ("ARG", "AUS", "CAN", "DEU", "EGY", "ETH", "FRA", "IDN", "IRN", "KEN", "MEX", "NGA",
              "PAK", "RUS", "THA", "TUR", "UKR", "VNM", "ZAF", "ZMB", "PER", "POL", "ESP", "SDN")
# one year past 2020 so green seasons centered late in 2020 are complete
EXPERIMENT_YEARS = {"hist-nat": (1950, 2021), "historical": (1950, 2014), "ssp245": (2015, 2021)}
AGG_WEIGHTS = ("cropland", "cropland_pasture")
WINDOWS = ("green", "calendar")


def country_ids(n):
    ids = list(ANCHOR_COUNTRIES) + list(_OTHER_IDS)
    ids += [f"X{k:02d}" for k in range(len(ids), n)]
    return ids[:n]


@dataclass
class WorldParams:
    n_countries: int = 20
    years: tuple = (1961, 2015)  # TFP index years
    block: tuple = (4, 5)  # fine cells per country (lat, lon)
    dlat: float = 2.5
    coarse_factor: int = 2
    beta: dict = field(default_factory=lambda: {"dT": -0.005, "dT2": -0.001, "dP": 0.2, "dP2": -1.0})
    alpha_mean: float = 0.02  # mean country growth trend
    alpha_sd: float = 0.01
    theta_sd: float = 0.02
    noise: float = 0.02
    heteroskedastic: bool = False
    trend: float = 0.2  # degC per decade added to the all-forcing experiments
    n_gcm: int = 3
    gcm_bias: float = 1.0
    ndvi_years: tuple = (1982, 1991)
    ndvi_peaks: dict = None  # country -> month; drawn when None
    output_extra: float = 0.3  # output growth = TFP growth + extra * weather effect + input growth
    late_start: dict = None  # country -> first TFP year
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class World:
    params: WorldParams
    fine: GridSpec
    coarse: GridSpec
    mask: CountryMask
    meta: pd.DataFrame
    weights: dict  # name -> GridField
    ndvi: GridSeries
    obs: dict  # variable -> GridSeries
    gcm: dict  # gcm -> experiment -> variable -> GridSeries
    season_map: dict
    weather: dict  # (agg, window) -> seasonal country panel
    tfp: pd.DataFrame
    output: pd.DataFrame
    alpha: dict
    theta: dict

    @property
    def countries(self):
        return list(self.mask.countries)

    def truth(self):
        return {
            "params": self.params.to_dict(),
            "beta": dict(self.params.beta),
            "alpha": {c: float(v) for c, v in self.alpha.items()},
            "theta": {str(t): float(v) for t, v in self.theta.items()},
            "season_map": {c: int(m) for c, m in self.season_map.items()},
            "countries": self.countries,
            "fine_grid": self.fine.to_dict(),
            "coarse_grid": self.coarse.to_dict(),
        }


def _grids(p):
    rows = int(np.ceil(p.n_countries / 5))
    cols = min(p.n_countries, 5)
    nlat, nlon = rows * p.block[0], cols * p.block[1]
    f = p.coarse_factor
    nlat += (-nlat) % f
    nlon += (-nlon) % f
    d = p.dlat
    fine = GridSpec(-d * nlat / 2 + d / 2, -d * nlon / 2 + d / 2, d, d, nlat, nlon)
    D = d * f
    coarse = GridSpec(-D * (nlat // f) / 2 + D / 2, -D * (nlon // f) / 2 + D / 2, D, D, nlat // f,
                      nlon // f)
    codes = -np.ones(fine.shape, dtype=int)
    for k in range(p.n_countries):
        r, c = divmod(k, 5)
        codes[r * p.block[0]:(r + 1) * p.block[0], c * p.block[1]:(c + 1) * p.block[1]] = k
    return fine, coarse, CountryMask(fine, codes, country_ids(p.n_countries))


def _monthly_cycle(amp, peak):
    m = np.arange(1, 13)
    return amp[..., None] * np.cos(2 * np.pi * (m - peak[..., None]) / 12)


def _obs_weather(p, fine, mask, peaks, first, last, rng):
    """Monthly fine-grid weather; every cell carries its country's shocks plus local noise."""
    ny = last - first + 1
    lat = np.repeat(fine.lats[:, None], fine.nlon, axis=1)
    codes = np.where(mask.codes >= 0, mask.codes, 0)
    nc = len(mask.countries)
    warm = np.where(lat >= 0, 7.0, 1.0)
    clim_t = 26.0 - 0.35 * np.abs(lat)
    season_t = _monthly_cycle(0.25 * np.abs(lat) + 1.0, warm)  # (nlat, nlon, 12)
    shock_t = rng.normal(0, 0.8, (ny, 12, nc))
    noise_t = rng.normal(0, 0.15, (ny, 12) + fine.shape)
    years = np.arange(first, last + 1)
    # observations carry the same forced warming as the all-forcing runs
    drift = p.trend / 10.0 * np.maximum(0, years - 1961)
    tmean = (clim_t[None, None] + np.moveaxis(season_t, -1, 0)[None] + shock_t[:, :, codes]
             + noise_t + drift[:, None, None, None])
    dtr = 10.0 + 0.05 * np.abs(lat)
    tmin = tmean - dtr / 2 + rng.normal(0, 0.3, tmean.shape)
    tmax = tmean + dtr / 2 + rng.normal(0, 0.3, tmean.shape)
    peak_cell = np.asarray([peaks[c] for c in mask.countries])[codes]
    clim_p = 40.0 + np.moveaxis(_monthly_cycle(np.full(fine.shape, 80.0), peak_cell), -1, 0)
    clim_p = np.maximum(clim_p, 5.0)
    shock_p = rng.normal(0, 0.3, (ny, 12, nc))[:, :, codes] + rng.normal(0, 0.1, (ny, 12) + fine.shape)
    precip = clim_p[None] * np.exp(shock_p - 0.05)
    out = {}
    for name, arr in (("tmean", tmean), ("tmin", tmin), ("tmax", tmax), ("precip", precip)):
        out[name] = GridSeries(fine, arr.reshape(ny * 12, *fine.shape), name, (first, 1))
    return out


def _ndvi(p, fine, mask, peaks, rng):
    y0, y1 = p.ndvi_years
    ny = y1 - y0 + 1
    days = bin_midpoint_days()
    # peak placed between the month's two bins so the maximum is unambiguous
    peak_day = np.array([(2 * (peaks[c] - 1) + 1) * 365.0 / NBINS for c in mask.countries])
    codes = np.where(mask.codes >= 0, mask.codes, 0)
    phase = 2 * np.pi * (days[:, None, None] - peak_day[codes][None]) / 365.0
    base = 0.15 + 0.6 * np.maximum(np.cos(phase), 0.0)
    vals = base[None] + rng.normal(0, 0.005, (ny, NBINS) + fine.shape)
    vals = np.where(mask.codes[None, None] >= 0, vals, np.nan)
    return GridSeries(fine, vals.reshape(ny * NBINS, *fine.shape), "ndvi", (y0, 1))


def _weights(fine, mask, rng):
    crop = np.clip(rng.beta(2, 3, fine.shape), 0, 1)
    crop[rng.random(fine.shape) < 0.1] = 0.0
    pasture = np.clip(rng.beta(2, 4, fine.shape), 0, 1)
    cp = np.minimum(1.0, crop + pasture)
    land = mask.codes >= 0
    crop = np.where(land, crop, 0.0)
    cp = np.where(land, cp, 0.0)
    return {"cropland": GridField(fine, crop, "weight"), "cropland_pasture": GridField(fine, cp, "weight")}


def _gcm_fields(p, obs, coarse):
    """Coarse climate-model runs: biased, with their own weather, plus the forced trend."""
    base = {v: coarsen_area_weighted(s, coarse) for v, s in obs.items()}
    clim = {v: base[v].values.reshape(-1, 12, *coarse.shape).mean(axis=0) for v in base}
    first, last = EXPERIMENT_YEARS["hist-nat"]
    ny = last - first + 1
    years = np.repeat(np.arange(first, last + 1), 12)
    ramp = p.trend / 10.0 * np.maximum(0, years - 1961)
    out = {}
    for g in range(p.n_gcm):
        name = f"G{g + 1}"
        rng = substream(p.seed, "gcm", name)
        bias = rng.normal(0, p.gcm_bias, coarse.shape)
        shock = rng.normal(0, 0.8, (ny * 12,) + coarse.shape)
        nat = {}
        t = np.tile(clim["tmean"], (ny, 1, 1)) + bias + shock
        nat["tmean"] = t
        nat["tmin"] = t + (np.tile(clim["tmin"] - clim["tmean"], (ny, 1, 1)))
        nat["tmax"] = t + (np.tile(clim["tmax"] - clim["tmean"], (ny, 1, 1)))
        pscale = np.exp(rng.normal(0, 0.2, coarse.shape))
        nat["precip"] = (np.tile(clim["precip"], (ny, 1, 1)) * pscale
                         * np.exp(rng.normal(0, 0.3, (ny * 12,) + coarse.shape) - 0.045))
        exps = {e: {} for e in EXPERIMENT_YEARS}
        for v, arr in nat.items():
            forced = arr + (ramp[:, None, None] if v != "precip" else 0.0)
            full_nat = GridSeries(coarse, arr, v, (first, 1))
            full_all = GridSeries(coarse, forced, v, (first, 1))
            exps["hist-nat"][v] = full_nat
            exps["historical"][v] = full_all.select_years(*EXPERIMENT_YEARS["historical"])
            exps["ssp245"][v] = full_all.select_years(*EXPERIMENT_YEARS["ssp245"])
        out[name] = exps
    return out


def seasonal_panels(obs, weights, mask, season_map, countries=None):
    """Seasonal country weather for every (aggregation weight, window) pair."""
    panels = {}
    for agg, wf in weights.items():
        monthly = None
        for var, series in obs.items():
            tab, _ = zonal_aggregate(series, wf, mask, countries, name=var)
            monthly = tab if monthly is None else monthly.merge(tab, on=["country", "year", "month"])
        for window in WINDOWS:
            panels[(agg, window)] = seasonal_aggregate(monthly, season_map, window)
    return panels


def season_map_from_ndvi(ndvi, weights, mask, donors=None):
    cells = greenest_month_cell(ndvi_climatology(ndvi))
    return country_green_month(cells, weights, mask, donors=donors)


def generate_world(p=None):
    """Build a complete synthetic bundle; deterministic in ``p.seed``."""
    p = p or WorldParams()
    fine, coarse, mask = _grids(p)
    ids = list(mask.countries)
    rng = substream(p.seed, "world")
    peaks = dict(p.ndvi_peaks or {})
    for c in ids:
        peaks.setdefault(c, int(rng.integers(1, 13)))
    lat_c = {c: float(np.repeat(fine.lats[:, None], fine.nlon, axis=1)[mask.codes == k].mean()) for k, c in enumerate(ids)}
    meta = pd.DataFrame({
        "country": ids,
        "region": [REGIONS[k % len(REGIONS)] for k in range(len(ids))],
        "latitude": [lat_c[c] for c in ids],
        "revenue_weight": rng.gamma(2.0, 1.0, len(ids)),
    })
    meta["revenue_weight"] /= meta["revenue_weight"].sum()

    weights = _weights(fine, mask, substream(p.seed, "landcover"))
    ndvi = _ndvi(p, fine, mask, peaks, substream(p.seed, "ndvi"))
    season_map = season_map_from_ndvi(ndvi, weights["cropland"], mask)
    if season_map != peaks:
        raise AssertionError("synthetic NDVI does not reproduce the configured peak months")
    y0, y1 = p.years
    obs = _obs_weather(p, fine, mask, peaks, y0 - 1, y1 + 1, substream(p.seed, "obs"))
    weather = seasonal_panels(obs, weights, mask, season_map)

    # TFP growth from the fixed-effects equation on the baseline regressors
    trng = substream(p.seed, "tfp")
    alpha = dict(zip(ids, trng.normal(p.alpha_mean, p.alpha_sd, len(ids))))
    gyears = np.arange(y0 + 1, y1 + 1)
    theta = dict(zip(gyears.tolist(), trng.normal(0, p.theta_sd, len(gyears))))
    grid = pd.DataFrame([(c, t, 0.0) for c in ids for t in gyears], columns=["country", "year", "dln_tfp"])
    terms = list(p.beta)
    form = {1: "linear", 2: "quadratic", 3: "cubic"}[sum(t.startswith("dT") for t in terms)]
    rt = assemble_panel(grid, weather[("cropland", "green")], meta, tvar="tmean",
                        precip=any(t.startswith("dP") for t in terms), form=form, min_coverage=1.0)
    d = rt.data
    effect = sum(b * d[t].to_numpy() for t, b in p.beta.items())
    sd = np.full(len(d), p.noise)
    if p.heteroskedastic:
        sd = sd * (0.5 + 1.5 * trng.random(len(ids)))[pd.Index(ids).get_indexer(d["country"])]
    eps = trng.normal(0, 1, len(d)) * sd
    growth = (d["country"].map(alpha).to_numpy() + d["year"].map(theta).to_numpy() + effect + eps)
    level0 = dict(zip(ids, trng.normal(0, 0.2, len(ids))))
    tfp = _levels(d["country"], d["year"], growth, level0, y0)
    inputs = (d["country"].map(dict(zip(ids, trng.normal(0.02, 0.01, len(ids))))).to_numpy()
              + trng.normal(0, p.noise, len(d)))
    output = _levels(d["country"], d["year"], growth + p.output_extra * effect + inputs, level0, y0)
    output = output.rename(columns={"ln_tfp": "ln_output"})
    if p.late_start:
        keep = np.ones(len(tfp), bool)
        for c, first in p.late_start.items():
            keep &= ~((tfp["country"] == c) & (tfp["year"] < first))
        tfp = tfp[keep].reset_index(drop=True)
        output = output[keep].reset_index(drop=True)

    gcm = _gcm_fields(p, obs, coarse)
    return World(p, fine, coarse, mask, meta, weights, ndvi, obs, gcm, season_map, weather, tfp,
                 output, alpha, theta)


def _levels(country, year, growth, level0, y0):
    df = pd.DataFrame({"country": np.asarray(country), "year": np.asarray(year), "g": growth})
    rows = []
    for c, grp in df.groupby("country", sort=True):
        grp = grp.sort_values("year")
        lv = level0[c] + np.concatenate([[0.0], np.cumsum(grp["g"].to_numpy())])
        yrs = np.concatenate([[y0], grp["year"].to_numpy()])
        rows.append(pd.DataFrame({"country": c, "year": yrs, "ln_tfp": lv}))
    return pd.concat(rows, ignore_index=True)


def write_world(world, out):
    """Write the bundle in native formats; returns the bundle manifest dict."""
    out = Path(out)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    (out / "gcm").mkdir(parents=True, exist_ok=True)
    write_index_panel(world.tfp, out / "tfp.csv")
    write_index_panel(world.output, out / "output.csv", value="ln_output", column="output_index")
    write_meta(world.meta, out / "meta.csv")
    world.mask.save(out / "mask.json")
    files = {"obs": {}, "weights": {}}
    for v, s in world.obs.items():
        write_grid(out / "grids" / f"obs_{v}.grd", s)
        files["obs"][v] = f"grids/obs_{v}.grd"
    for name, f in world.weights.items():
        write_grid(out / "grids" / f"{name}.grd", f)
        files["weights"][name] = f"grids/{name}.grd"
    write_grid(out / "grids" / "ndvi.grd", world.ndvi)
    members = {}
    for g, exps in world.gcm.items():
        members[g] = {}
        for e, vars_ in exps.items():
            members[g][e] = {}
            for v, s in vars_.items():
                rel = f"{g}_{e}_{v}.grd"
                write_grid(out / "gcm" / rel, s)
                members[g][e][v] = rel
    (out / "gcm" / "manifest.json").write_text(json.dumps(
        {"grid": world.coarse.to_dict(), "members": members}, indent=2, sort_keys=True) + "\n")
    write_season_map(world.season_map, out / "season_truth.csv")
    (out / "truth.json").write_text(json.dumps(world.truth(), indent=2, sort_keys=True) + "\n")
    manifest = {
        "tfp": "tfp.csv", "output": "output.csv", "meta": "meta.csv", "mask": "mask.json",
        "ndvi": "grids/ndvi.grd", "gcm_manifest": "gcm/manifest.json", "truth": "truth.json",
        **files,
    }
    (out / "bundle.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- small-scale generators

def simulate_regtable(n_countries=16, n_years=25, beta=None, noise=0.02, seed=0, first_year=1962,
                      precip=True, form="quadratic", n_regions=len(REGIONS), weather_sd=1.0,
                      heteroskedastic=False):
    """Country-year regression table drawn directly at the panel level.

    Weather differences are iid normal, so blocks, years and countries are
    exchangeable under the null ``beta = 0``.
    """
    from tfpacc.dataio import weather_terms

    terms = weather_terms(precip, form)
    beta = {t: 0.0 for t in terms} if beta is None else {t: beta.get(t, 0.0) for t in terms}
    rng = substream(seed, "regtable")
    ids = [f"K{i:03d}" for i in range(n_countries)]
    years = np.arange(first_year, first_year + n_years)
    n = n_countries * n_years
    d = pd.DataFrame({"country": np.repeat(ids, n_years), "year": np.tile(years, n_countries)})
    d["region"] = np.repeat([REGIONS[i % n_regions] for i in range(n_countries)], n_years)
    lat = rng.uniform(-50, 60, n_countries)
    d["latitude"] = np.repeat(lat, n_years)
    order = np.argsort(np.abs(lat), kind="stable")
    grp = np.empty(n_countries, int)
    for g, chunk in enumerate(np.array_split(order, 3)):
        grp[chunk] = g
    d["lat_group"] = np.repeat(grp, n_years)
    d["rev_weight"] = np.repeat(rng.gamma(2.0, 1.0, n_countries), n_years)
    d["T"] = np.repeat(rng.uniform(5, 28, n_countries), n_years) + rng.normal(0, 1, n)
    d["dT"] = rng.normal(0, weather_sd, n)
    d["dP"] = rng.normal(0, 0.1 * weather_sd, n)
    for k in (2, 3):
        d[f"dT{k}"] = d["dT"] ** k
        d[f"dP{k}"] = d["dP"] ** k
    a = np.repeat(rng.normal(0.01, 0.01, n_countries), n_years)
    th = np.tile(rng.normal(0, 0.02, n_years), n_countries)
    sd = noise * (np.repeat(0.5 + 1.5 * rng.random(n_countries), n_years) if heteroskedastic else 1.0)
    d["dln_tfp"] = a + th + sum(b * d[t] for t, b in beta.items()) + rng.normal(0, 1, n) * sd
    cols = ["country", "year", "region", "latitude", "lat_group", "rev_weight", "dln_tfp", "T"]
    cols += [c for c in terms] + [c for c in ("dT2", "dP2") if c not in terms]
    return RegTable(d[cols], tvar="tmean", precip=precip, form=form)


def make_scenario_set(countries, gcms=("G1",), years=(1961, 2020), trend=0.03, base_t=15.0,
                      base_p=400.0, noise=0.0, seed=0, shared_noise=True, tvars=("tmean", "tmin", "tmax")):
    """Country-level scenarios: with = without + ``trend * (year - 1961)`` in every temperature.

    ``trend`` is in degC per year. The baseline equals ``base_t``/``base_p``;
    optional noise is drawn per (GCM, country, year), shared between the two
    worlds when ``shared_noise`` so the forced difference stays exact.
    """
    countries = list(countries)
    yrs = np.arange(years[0], years[1] + 1)
    members = {}
    for g in gcms:
        rng = substream(seed, "scenario", g)
        nat_t = base_t + noise * rng.normal(size=(len(countries), len(yrs)))
        nat_p = base_p * np.exp(0.1 * noise * rng.normal(size=(len(countries), len(yrs))))
        if shared_noise:
            all_t, all_p = nat_t.copy(), nat_p.copy()
        else:
            all_t = base_t + noise * rng.normal(size=nat_t.shape)
            all_p = base_p * np.exp(0.1 * noise * rng.normal(size=nat_p.shape))
        all_t = all_t + trend * (yrs - 1961)[None, :]

        def frame(t, p):
            df = pd.DataFrame({"country": np.repeat(countries, len(yrs)), "year": np.tile(yrs, len(countries))})
            for v in tvars:
                df[v] = t.ravel()
            df["precip"] = p.ravel()
            return df

        base = pd.DataFrame({"country": countries})
        for v in tvars:
            base[v] = float(base_t)
        base["precip"] = float(base_p)
        members[g] = ScenarioMember(frame(all_t, all_p), frame(nat_t, nat_p), base)
    return ScenarioSet(members)


# ---------------------------------------------------------------- oracle

def oracle_fe_ols(X, y, country, year, weights=None):
    """Weighted least squares with explicit country and year dummies.

    All country dummies are included (they carry the intercept) and the
    first year dummy is dropped. Solved by dense normal equations; a
    singular system raises RankDeficiencyError.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    cu, ci = np.unique(np.asarray(country), return_inverse=True)
    tu, ti = np.unique(np.asarray(year), return_inverse=True)
    C = np.zeros((len(y), len(cu)))
    C[np.arange(len(y)), ci] = 1.0
    T = np.zeros((len(y), len(tu)))
    T[np.arange(len(y)), ti] = 1.0
    D = np.hstack([X, C, T[:, 1:]])
    A = D.T @ (D * w[:, None])
    b = D.T @ (w * y)
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise RankDeficiencyError([f"x{j}" for j in range(X.shape[1])], "singular dummy-variable system")
    sol = np.linalg.solve(A, b)
    return sol[:X.shape[1]]


def bundle_from_world(world, members=None):
    """In-memory DataBundle with scenarios for every (aggregation weight, window) pair."""
    from tfpacc.downscale import assemble_scenarios, downscale_members
    from tfpacc.pipeline import DataBundle, growth_panel

    if members is None:
        s = world.obs["tmean"]
        first, last = s.start[0], s.start[0] + len(s) // 12 - 1
        members = downscale_members(world.gcm, world.obs, world.coarse, train=(max(1961, first), min(2014, last)))
    scen = {}
    for agg, wf in world.weights.items():
        for window in WINDOWS:
            scen[(agg, window)] = assemble_scenarios(members, wf, world.mask, world.season_map, window)
    return DataBundle(growth_panel(world.tfp, world.output), world.meta, dict(world.weather), scen)
