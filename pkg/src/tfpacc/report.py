"""Plot-ready CSV tables, one group per figure (fig1 ... fig5).

Each table is written when its inputs exist; the others are skipped with a
log message. Optional inputs are stage output directories named in the run
configuration (``bootstrap``, ``placebo``, ``impact``, ``sweep``).
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from tfpacc.econ import DEPENDENT_COLUMN, response_bands

log = logging.getLogger(__name__)


def _csv(df, path):
    df.to_csv(path, index=False, float_format="%.17g")


def fig1_tables(bundle, spec, out):
    """TFP levels and growth by country; observed vs scenario weather by year."""
    value = DEPENDENT_COLUMN[spec.dependent]
    g = bundle.growth.dropna(subset=[value]).sort_values(["country", "year"])
    g = g.assign(level=100 * np.exp(g.groupby("country")[value].cumsum()))
    _csv(g[["country", "year", value, "level"]], out / "fig1_tfp.csv")
    stats = g.groupby("year")[value].describe(percentiles=[0.25, 0.5, 0.75]).reset_index()
    _csv(stats, out / "fig1_growth_distribution.csv")
    key = (spec.agg_weights, spec.window)
    w = bundle.weather[key]
    rows = []
    for var in ("tmean", "precip"):
        if var not in w.columns:
            continue
        obs = w.groupby("year")[var].mean()
        df = pd.DataFrame({"year": obs.index, "variable": var, "observed": obs.to_numpy()})
        if key in bundle.scenarios:
            ss = bundle.scenarios[key]
            for name, attr in (("with", "with_acc"), ("without", "without_acc")):
                per = pd.DataFrame({g_: getattr(ss.members[g_], attr).groupby("year")[var].mean()
                                    for g_ in ss.gcms})
                df = df.merge(pd.DataFrame({"year": per.index, f"{name}_min": per.min(axis=1).to_numpy(),
                                            f"{name}_max": per.max(axis=1).to_numpy()}),
                              on="year", how="outer")
        rows.append(df)
    _csv(pd.concat(rows, ignore_index=True), out / "fig1_weather.csv")
    return ["fig1_tfp.csv", "fig1_growth_distribution.csv", "fig1_weather.csv"]


def fig2_tables(bundle, spec, out, boot_dir=None, placebo_dir=None):
    """Response curves with bootstrap bands and placebo distributions."""
    from tfpacc.inference import BootstrapEnsemble

    written = []
    rt = bundle.regtable(spec)
    if boot_dir and (Path(boot_dir) / "bootstrap.csv").exists():
        be = BootstrapEnsemble.read(Path(boot_dir) / "bootstrap.csv",
                                    Path(boot_dir) / "bootstrap_summary.json")
        frames = []
        variables = ["T"] + (["P"] if spec.precip == "include" else [])
        groups = [None] if spec.hetero == "pooled" else [0, 1, 2]
        for var in variables:
            lv = rt.data["T" if var == "T" else "P"].to_numpy()
            grid = np.linspace(np.percentile(lv, 1), np.percentile(lv, 99), 101)
            # curves are drawn against the seasonal level, the response applies to its change
            dev = grid - lv.mean()
            for grp in groups:
                band = response_bands(be.coefs, be.names, var, dev, lv - lv.mean(), group=grp)
                band.insert(0, "level", grid)
                band.insert(0, "group", "pooled" if grp is None else f"g{grp}")
                band.insert(0, "variable", var)
                frames.append(band)
            hist, edges = np.histogram(lv, bins=40)
            _csv(pd.DataFrame({"lo": edges[:-1], "hi": edges[1:], "count": hist}),
                 out / f"fig2_exposure_{var}.csv")
            written.append(f"fig2_exposure_{var}.csv")
        _csv(pd.concat(frames, ignore_index=True), out / "fig2_response.csv")
        written.append("fig2_response.csv")
    else:
        log.info("report: no bootstrap directory; response bands skipped")
    if placebo_dir:
        for mode in ("year", "country"):
            p = Path(placebo_dir) / f"placebo_{mode}.csv"
            if p.exists():
                _csv(pd.read_csv(p, float_precision="round_trip"), out / f"fig2_placebo_{mode}.csv")
                written.append(f"fig2_placebo_{mode}.csv")
    return written


def fig34_tables(impact_dir, out):
    impact_dir = Path(impact_dir)
    lv = pd.read_csv(impact_dir / "levels.csv", float_precision="round_trip")
    imp = pd.read_csv(impact_dir / "impacts.csv", dtype={"unit": str, "gcm": str}, float_precision="round_trip")
    _csv(lv[lv["unit"] == "global"], out / "fig3_paths.csv")
    end = imp["year"].max()
    term = imp[imp["year"] == end]
    _csv(term[term["unit"] == "global"][["member_id", "draw_id", "gcm", "impact"]],
         out / "fig3_terminal_members.csv")
    _csv(term[term["unit"] != "global"][["unit", "member_id", "impact"]], out / "fig4_region_members.csv")
    q = term.groupby("unit")["impact"].describe(percentiles=[0.025, 0.05, 0.5, 0.95, 0.975]).reset_index()
    q["mean_pct"] = 100 * np.expm1(q["mean"])
    _csv(q, out / "fig4_region_summary.csv")
    ci = pd.read_csv(impact_dir / "country_impacts.csv", dtype={"country": str},
                     float_precision="round_trip")
    _csv(ci[ci["year"] == ci["year"].max()], out / "fig4_country_means.csv")
    return ["fig3_paths.csv", "fig3_terminal_members.csv", "fig4_region_members.csv",
            "fig4_region_summary.csv", "fig4_country_means.csv"]


def fig5_table(sweep_dir, out):
    df = pd.read_csv(Path(sweep_dir) / "sweep.csv", float_precision="round_trip")
    ok = df[(df["status"] == "ok") & (df["restriction"] == "none")]
    df["unrestricted_mean_pct"] = ok["impact_mean_pct"].mean()
    df["unrestricted_sd_pct"] = ok["impact_mean_pct"].std(ddof=1)
    df = df.sort_values(["is_baseline", "impact_mean_pct"], ascending=[False, True], kind="stable")
    _csv(df, out / "fig5_sweep.csv")
    return ["fig5_sweep.csv"]


def write_report(cfg, bundle, spec, out):
    inputs = cfg["inputs"]
    written = fig1_tables(bundle, spec, out)
    written += fig2_tables(bundle, spec, out, inputs.get("bootstrap"), inputs.get("placebo"))
    if inputs.get("impact"):
        written += fig34_tables(inputs["impact"], out)
    else:
        log.info("report: no impact directory; figures 3-4 skipped")
    if inputs.get("sweep"):
        written += fig5_table(inputs["sweep"], out)
    else:
        log.info("report: no sweep directory; figure 5 skipped")
    return {"tables": written}
