"""Prepared inputs for every model spec and the single-spec runner shared by all entry points."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from tfpacc.counterfactual import ensemble_impacts, project_and_level, summarize
from tfpacc.dataio import assemble_panel, first_difference, load_meta, load_output_panel, load_tfp_panel
from tfpacc.downscale import ScenarioSet
from tfpacc.econ import DEPENDENT_COLUMN, build_design, fit_design
from tfpacc.errors import DataValidationError
from tfpacc.inference import bootstrap_design, kfold_cv
from tfpacc.rng import derive_seed

log = logging.getLogger(__name__)


@dataclass
class DataBundle:
    """Growth panel, metadata, and weather/scenario inputs per (aggregation weight, window)."""

    growth: pd.DataFrame  # country, year, dln_tfp[, dln_output]
    meta: pd.DataFrame
    weather: dict  # (agg, window) -> seasonal panel
    scenarios: dict = field(default_factory=dict)  # (agg, window) -> ScenarioSet
    signed_latitude: bool = False  # lat3 terciles on signed rather than absolute latitude

    def regtable(self, spec):
        key = (spec.agg_weights, spec.window)
        if key not in self.weather:
            raise DataValidationError(f"no weather panel for aggregation={key[0]}, window={key[1]}")
        return assemble_panel(self.growth, self.weather[key], self.meta, spec,
                              signed_latitude=self.signed_latitude)

    def scenario_set(self, spec):
        key = (spec.agg_weights, spec.window)
        if key not in self.scenarios:
            raise DataValidationError(f"no scenarios for aggregation={key[0]}, window={key[1]}")
        return self.scenarios[key]


def growth_panel(tfp, output=None):
    g = first_difference(tfp, "ln_tfp")
    if output is not None:
        g = g.merge(first_difference(output, "ln_output"), on=["country", "year"], how="outer")
    return g.sort_values(["country", "year"], ignore_index=True)


def load_bundle(root):
    """Read a prepared directory.

    Expects meta.csv, growth.csv (or tfp.csv and optional output.csv),
    weather_<agg>_<window>.csv and optionally scenarios_<agg>_<window>.csv.
    """
    root = Path(root)
    if (root / "growth.csv").exists():
        growth = pd.read_csv(root / "growth.csv", dtype={"country": str}, float_precision="round_trip")
    else:
        tfp = load_tfp_panel(root / "tfp.csv")
        out = load_output_panel(root / "output.csv") if (root / "output.csv").exists() else None
        growth = growth_panel(tfp, out)
    meta = load_meta(root / "meta.csv")
    weather, scen = {}, {}
    for p in sorted(root.glob("weather_*_*.csv")):
        agg, window = p.stem[len("weather_"):].rsplit("_", 1)
        weather[(agg, window)] = pd.read_csv(p, dtype={"country": str}, float_precision="round_trip")
    for p in sorted(root.glob("scenarios_*_*.csv")):
        agg, window = p.stem[len("scenarios_"):].rsplit("_", 1)
        scen[(agg, window)] = ScenarioSet.read_csv(p)
    if not weather:
        raise DataValidationError(f"{root}: no weather_<agg>_<window>.csv panels")
    return DataBundle(growth, meta, weather, scen)


def stage_seed(seed, spec, stage):
    """Seed of one stage of one spec; independent of run order and worker count."""
    return derive_seed(seed, spec.hash(), stage)


@dataclass
class SpecResult:
    spec: object
    fit: object
    bootstrap: object
    ensemble: object
    levels: object
    summary: dict
    cv: object

    def row(self):
        h = self.summary["headline"]
        r = {**self.spec.to_dict(), "spec_hash": self.spec.hash(), "n": self.fit.n,
             "impact_mean_log": h["mean_log"], "impact_mean_pct": h["mean_pct"],
             "ci90_lo_pct": h["ci90_pct"][0], "ci90_hi_pct": h["ci90_pct"][1],
             "ci95_lo_pct": h["ci95_pct"][0], "ci95_hi_pct": h["ci95_pct"][1],
             "cv_reduction": self.cv.reduction if self.cv is not None else np.nan}
        return r


def run_spec(bundle, spec, B=500, n_ensemble=2000, seed=0, k=10, workers=1, with_cv=True):
    """Fit, bootstrap, forced-impact ensemble and cross-validation for one spec."""
    rt = bundle.regtable(spec)
    design = build_design(rt, spec)
    fit = fit_design(design, spec)
    be = bootstrap_design(design, B, stage_seed(seed, spec, "bootstrap"), workers=workers, spec=spec)
    ss = bundle.scenario_set(spec)
    ie = ensemble_impacts(be, ss, n_ensemble, stage_seed(seed, spec, "ensemble"))
    value = DEPENDENT_COLUMN[spec.dependent]
    growth = bundle.growth.dropna(subset=[value])
    levels = project_and_level(growth, ie, bundle.meta, value=value)
    summary = summarize(ie, levels)
    cv = kfold_cv(rt, spec, k, stage_seed(seed, spec, "cv"), design=design) if with_cv else None
    return SpecResult(spec, fit, be, ie, levels, summary, cv)
