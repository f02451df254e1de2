"""Command-line entry point: ``tfpacc <command> --config run.json [overrides]``.

Configuration precedence: built-in defaults < JSON config file < command-line
flags. Every command writes its outputs plus ``manifest_<command>.json`` under
``--out``. Exit codes: 0 success, 1 usage/config error, 2 data validation
failure, 3 numerical failure.
"""
import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

import tfpacc
from tfpacc.errors import ConfigError, DataValidationError, NumericalError, TfpAccError
from tfpacc.parallel import resolve_workers

log = logging.getLogger("tfpacc")

COMMANDS = ("ingest", "season", "downscale", "fit", "bootstrap", "placebo", "cv", "impact", "sweep",
            "synth", "report")

DEFAULTS = {
    "seed": None,
    "out": None,
    "workers": None,
    "inputs": {},
    "spec": {},
    "B": 500,
    "R": 10000,
    "n_ensemble": 2000,
    "k": 10,
    "placebo_mode": "year",
    "lags": None,
    "slope_split": None,
    "all_members": False,
    "train_years": [1961, 2014],
    "baseline_years": [1950, 1972],
    "ratio_cap": 5.0,
    "min_coverage": 0.9,
    "signed_latitude": False,
    "donors": {},
    "sweep_specs": None,
    "synth": {},
}

# input keys each command needs; dotted paths into config["inputs"]
REQUIRED = {
    "synth": [],
    "season": ["ndvi", "mask", "weights"],
    "ingest": ["tfp", "meta", "mask", "obs", "weights", "season_map"],
    "downscale": ["gcm_manifest", "obs", "mask", "weights", "season_map"],
    "fit": ["data"],
    "bootstrap": ["data"],
    "placebo": ["data"],
    "cv": ["data"],
    "impact": ["data"],
    "sweep": ["data"],
    "report": ["data"],
}
OPTIONAL = {"ingest": ["output"], "impact": ["bootstrap"],
            "report": ["bootstrap", "placebo", "impact", "sweep"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def build_parser():
    p = _Parser(prog="tfpacc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=tfpacc.__version__)
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} stage")
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int, help="master seed (required)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--workers", type=int, help="worker processes (default: ATTRIB_WORKERS or 1)")
        s.add_argument("--input", action="append", default=[], metavar="KEY=PATH",
                       help="set inputs.KEY (dotted keys allowed, e.g. obs.tmean)")
        s.add_argument("--spec", action="append", default=[], metavar="FIELD=VALUE",
                       help="set a model-spec field")
        s.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="set any config key (value parsed as JSON when possible)")
        s.add_argument("-B", "--B", dest="B", type=int, help="bootstrap draws")
        s.add_argument("-R", "--R", dest="R", type=int, help="placebo replicates")
        s.add_argument("--n-ensemble", type=int, help="impact ensemble size")
        s.add_argument("-k", "--k", dest="k", type=int, help="cross-validation folds")
        s.add_argument("--mode", dest="placebo_mode", choices=("year", "country", "both"))
        s.add_argument("--all-members", action="store_true", default=None,
                       help="write every country member path to impacts.csv")
        s.add_argument("-v", "--verbose", action="count", default=0)
    return p


# ---------------------------------------------------------------- config

def _set_dotted(d, key, value):
    parts = key.split(".")
    for k in parts[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {key}: {k} is not a mapping")
    d[parts[-1]] = value


def _split_kv(item, flag):
    if "=" not in item:
        raise ConfigError(f"{flag} expects KEY=VALUE, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v


def _parse_value(v):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def _merge(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args):
    cfg = json.loads(json.dumps(DEFAULTS))
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config: file does not exist: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON in {path}: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config: top level must be an object")
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        base = path.parent
        if isinstance(user.get("out"), str) and not Path(user["out"]).is_absolute():
            user["out"] = str(base / user["out"])
        cfg = _merge(cfg, user)
    cfg["inputs"] = _resolve_paths(cfg["inputs"], base)
    for item in args.input:
        k, v = _split_kv(item, "--input")
        _set_dotted(cfg["inputs"], k, str(Path(v)))
    for item in args.spec:
        k, v = _split_kv(item, "--spec")
        cfg["spec"][k] = v
    for item in args.set:
        k, v = _split_kv(item, "--set")
        if k.split(".")[0] not in DEFAULTS:
            raise ConfigError(f"--set: unknown key {k}")
        _set_dotted(cfg, k, _parse_value(v))
    for key in ("seed", "out", "workers", "B", "R", "n_ensemble", "k", "placebo_mode", "all_members"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["seed"] is None:
        raise ConfigError("seed: a seed is required (config key 'seed' or --seed)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed: must be a nonnegative integer")
    if not cfg["out"]:
        raise ConfigError("out: an output directory is required (config key 'out' or --out)")
    try:
        cfg["workers"] = resolve_workers(cfg["workers"])
    except (TypeError, ValueError):
        raise ConfigError("workers: --workers / ATTRIB_WORKERS must be an integer") from None
    return cfg


def _resolve_paths(inputs, base):
    out = {}
    for k, v in inputs.items():
        if isinstance(v, dict):
            out[k] = _resolve_paths(v, base)
        elif isinstance(v, str):
            p = Path(v)
            out[k] = str(p if p.is_absolute() else base / p)
        else:
            out[k] = v
    return out


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def validate_inputs(cfg, command):
    inputs = cfg["inputs"]
    for key in REQUIRED[command]:
        if key not in inputs or inputs[key] in (None, "", {}):
            raise ConfigError(f"inputs.{key}: required by '{command}' but not set")
    for key in REQUIRED[command] + [k for k in OPTIONAL.get(command, []) if inputs.get(k)]:
        v = inputs[key]
        items = _flatten(v, f"{key}.") if isinstance(v, dict) else [(key, v)]
        for name, path in items:
            if not Path(path).exists():
                raise ConfigError(f"inputs.{name}: path does not exist: {path}")


def model_spec(cfg):
    from tfpacc.econ import BASELINE

    try:
        return BASELINE.replace(**cfg["spec"])
    except (TypeError, DataValidationError) as e:
        raise ConfigError(f"spec: {e}") from None


def config_hash(cfg):
    blob = json.dumps({k: v for k, v in cfg.items() if k not in ("out", "workers")}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- shared loaders

def _load_mask(cfg):
    from tfpacc.gridops import CountryMask

    return CountryMask.load(cfg["inputs"]["mask"])


def _load_weights(cfg, spec=None):
    """Land-cover weight fields keyed by aggregation name, on ``spec``'s grid when given."""
    from tfpacc.gridops import read_field, resample_bilinear

    w = cfg["inputs"]["weights"]
    if isinstance(w, str):
        w = {"cropland": w}
    out = {}
    for name, path in w.items():
        f = read_field(path)
        if spec is not None and f.spec != spec:
            log.info("resampling %s weights to the target grid", name)
            f = resample_bilinear(f, spec)
            f.values = np.clip(f.values, 0.0, 1.0)
        out[name] = f
    return out


def _load_obs(cfg):
    from tfpacc.gridops import read_grid

    obs = cfg["inputs"]["obs"]
    if isinstance(obs, str):
        raise ConfigError("inputs.obs: expected a mapping variable -> grid file")
    return {v: read_grid(p) for v, p in sorted(obs.items())}


def _season_maps(cfg, agg_names):
    from tfpacc.season import read_season_map

    p = Path(cfg["inputs"]["season_map"])
    if p.is_file():
        m = read_season_map(p)
        return {a: m for a in agg_names}
    out = {}
    for a in agg_names:
        f = p / f"season_map_{a}.csv"
        if not f.exists():
            raise ConfigError(f"inputs.season_map: {f} not found")
        out[a] = read_season_map(f)
    return out


def _bundle(cfg):
    from tfpacc.pipeline import load_bundle

    bundle = load_bundle(cfg["inputs"]["data"])
    bundle.signed_latitude = bool(cfg["signed_latitude"])
    return bundle


def _write_csv(df, path):
    df.to_csv(path, index=False, float_format="%.17g")


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, out):
    from tfpacc.synth import WorldParams, generate_world, write_world

    params = dict(cfg["synth"])
    params.setdefault("seed", cfg["seed"])
    for k in ("years", "block", "ndvi_years"):
        if k in params:
            params[k] = tuple(params[k])
    try:
        p = WorldParams(**params)
    except TypeError as e:
        raise ConfigError(f"synth: {e}") from None
    world = generate_world(p)
    write_world(world, out)
    return {"countries": len(world.countries)}


def cmd_season(cfg, out):
    from tfpacc.gridops import read_grid
    from tfpacc.season import (country_green_month, greenest_month_cell, ndvi_climatology,
                               write_season_map)

    ndvi = read_grid(cfg["inputs"]["ndvi"])
    mask = _load_mask(cfg)
    if mask.spec != ndvi.spec:
        raise DataValidationError("inputs.mask: the country mask must be on the NDVI grid")
    cells = greenest_month_cell(ndvi_climatology(ndvi))
    _write_csv(pd.DataFrame({"lat": np.repeat(ndvi.spec.lats, ndvi.spec.nlon),
                             "lon": np.tile(ndvi.spec.lons, ndvi.spec.nlat),
                             "greenest_month": cells.ravel()}), out / "cell_green_month.csv")
    result = {}
    for name, wf in _load_weights(cfg, ndvi.spec).items():
        m = country_green_month(cells, wf, mask, donors=cfg["donors"])
        write_season_map(m, out / f"season_map_{name}.csv")
        result[name] = len(m)
    return {"countries": result}


def _panels(cfg, obs, weights, mask, season_maps):
    from tfpacc.synth import seasonal_panels

    panels = {}
    for name, wf in weights.items():
        panels.update(seasonal_panels(obs, {name: wf}, mask, season_maps[name]))
    return panels


def cmd_ingest(cfg, out):
    from tfpacc.dataio import (assemble_panel, first_difference, load_meta, load_output_panel,
                               load_tfp_panel, write_meta)
    from tfpacc.econ import BASELINE

    tfp = load_tfp_panel(cfg["inputs"]["tfp"])
    growth = first_difference(tfp, "ln_tfp")
    if cfg["inputs"].get("output"):
        growth = growth.merge(first_difference(load_output_panel(cfg["inputs"]["output"]), "ln_output"),
                              on=["country", "year"], how="outer")
    meta = load_meta(cfg["inputs"]["meta"])
    obs = _load_obs(cfg)
    mask = _load_mask(cfg)
    grid = next(iter(obs.values())).spec
    if mask.spec != grid:
        raise DataValidationError("inputs.mask: the country mask must be on the weather grid")
    weights = _load_weights(cfg, grid)
    maps = _season_maps(cfg, list(weights))
    panels = _panels(cfg, obs, weights, mask, maps)
    growth = growth.sort_values(["country", "year"], ignore_index=True)
    _write_csv(growth, out / "growth.csv")
    write_meta(meta, out / "meta.csv")
    report = {"growth_rows": int(len(growth)), "countries": int(growth["country"].nunique()), "panels": {}}
    for (agg, window), df in sorted(panels.items()):
        _write_csv(df, out / f"weather_{agg}_{window}.csv")
        rt = assemble_panel(growth.dropna(subset=["dln_tfp"]), df, meta, BASELINE,
                            min_coverage=cfg["min_coverage"])
        report["panels"][f"{agg}_{window}"] = {"rows": len(rt), "dropped": rt.drop_log}
    _write_json(report, out / "ingest_report.json")
    return {"growth_rows": report["growth_rows"]}


def cmd_downscale(cfg, out):
    from tfpacc.downscale import assemble_scenarios, downscale_members, load_manifest_members

    members = load_manifest_members(cfg["inputs"]["gcm_manifest"])
    obs = _load_obs(cfg)
    grid = next(iter(obs.values())).spec
    mask = _load_mask(cfg)
    weights = _load_weights(cfg, grid)
    maps = _season_maps(cfg, list(weights))
    coarse = next(iter(next(iter(next(iter(members.values())).values())).values())).spec
    fine = downscale_members(members, obs, coarse, tuple(cfg["train_years"]), cap=cfg["ratio_cap"])
    counts = {}
    for name, wf in weights.items():
        for window in ("green", "calendar"):
            ss = assemble_scenarios(fine, wf, mask, maps[name], window,
                                    baseline=tuple(cfg["baseline_years"]))
            ss.to_csv(out / f"scenarios_{name}_{window}.csv")
            counts[f"{name}_{window}"] = len(ss)
    return {"gcm_members": counts}


def cmd_fit(cfg, out):
    from tfpacc.econ import cumulative_lag_test, fit_spec, slope_change_test
    from tfpacc.pipeline import stage_seed

    spec = model_spec(cfg)
    bundle = _bundle(cfg)
    rt = bundle.regtable(spec)
    fr = fit_spec(rt, spec)
    fr.to_json(out / "fit.json")
    _write_csv(fr.coefficient_table(), out / "coefficients.csv")
    if len(fr.residuals) == len(rt.data):
        _write_csv(pd.DataFrame({"country": rt.data["country"], "year": rt.data["year"],
                                 "residual": fr.residuals}), out / "residuals.csv")
    res = {"coefficients": dict(zip(fr.names, map(float, fr.beta)))}
    if cfg["lags"] is not None:
        lt = cumulative_lag_test(rt, spec, int(cfg["lags"]), cfg["B"], stage_seed(cfg["seed"], spec, "lags"),
                                 workers=cfg["workers"])
        _write_json({"lags": lt.lags, "first_lag": lt.first_lag, "sums": lt.sums, "wald": lt.wald,
                     "pvalue": lt.pvalue}, out / "lag_test.json")
    if cfg["slope_split"] is not None:
        st = slope_change_test(rt, spec, int(cfg["slope_split"]), cfg["B"],
                               stage_seed(cfg["seed"], spec, "slope"), workers=cfg["workers"])
        _write_json({"split": st.split, "estimate": st.estimate, "pvalue": st.pvalue},
                    out / "slope_test.json")
    return res


def _bootstrap(cfg, bundle, spec):
    from tfpacc.econ import build_design
    from tfpacc.inference import bootstrap_design
    from tfpacc.pipeline import stage_seed

    design = build_design(bundle.regtable(spec), spec)
    return bootstrap_design(design, cfg["B"], stage_seed(cfg["seed"], spec, "bootstrap"),
                            workers=cfg["workers"], spec=spec)


def cmd_bootstrap(cfg, out):
    spec = model_spec(cfg)
    be = _bootstrap(cfg, _bundle(cfg), spec)
    be.to_csv(out / "bootstrap.csv")
    be.write_summary(out / "bootstrap_summary.json")
    return {"B": be.B, "redraws": be.redraws}


def cmd_placebo(cfg, out):
    from tfpacc.inference import placebo_test
    from tfpacc.pipeline import stage_seed

    spec = model_spec(cfg)
    rt = _bundle(cfg).regtable(spec)
    modes = ("year", "country") if cfg["placebo_mode"] == "both" else (cfg["placebo_mode"],)
    summary = {}
    for mode in modes:
        pd_ = placebo_test(rt, spec, mode, cfg["R"], stage_seed(cfg["seed"], spec, f"placebo-{mode}"),
                           workers=cfg["workers"])
        _write_csv(pd_.frame(), out / f"placebo_{mode}.csv")
        summary[mode] = pd_.summary()
    _write_json(summary, out / "placebo_summary.json")
    return {m: {k: v["percentile"] for k, v in s["terms"].items()} for m, s in summary.items()}


def cmd_cv(cfg, out):
    from tfpacc.inference import kfold_cv
    from tfpacc.pipeline import stage_seed

    spec = model_spec(cfg)
    res = kfold_cv(_bundle(cfg).regtable(spec), spec, cfg["k"], stage_seed(cfg["seed"], spec, "cv"))
    _write_json(res.to_dict(), out / "cv.json")
    return res.to_dict()


def cmd_impact(cfg, out):
    from tfpacc.counterfactual import ensemble_impacts, project_and_level, summarize, write_outputs
    from tfpacc.econ import DEPENDENT_COLUMN
    from tfpacc.inference import BootstrapEnsemble
    from tfpacc.pipeline import stage_seed

    spec = model_spec(cfg)
    bundle = _bundle(cfg)
    bdir = cfg["inputs"].get("bootstrap")
    if bdir:
        be = BootstrapEnsemble.read(Path(bdir) / "bootstrap.csv", Path(bdir) / "bootstrap_summary.json")
        if be.spec is not None and be.spec != spec:
            raise ConfigError("inputs.bootstrap: ensemble was built for a different spec")
        be.spec = spec
    else:
        be = _bootstrap(cfg, bundle, spec)
    ie = ensemble_impacts(be, bundle.scenario_set(spec), cfg["n_ensemble"],
                          stage_seed(cfg["seed"], spec, "ensemble"))
    value = DEPENDENT_COLUMN[spec.dependent]
    levels = project_and_level(bundle.growth.dropna(subset=[value]), ie, bundle.meta, value=value)
    summary = summarize(ie, levels)
    summary["spec"] = spec.to_dict()
    write_outputs(out, ie, levels, summary, all_members=bool(cfg["all_members"]))
    return {"headline_pct": summary["headline"]["mean_pct"]}


def cmd_sweep(cfg, out):
    from tfpacc.econ import ModelSpec
    from tfpacc.sweep import SweepFailure, enumerate_models, run_sweep

    specs = enumerate_models(model_spec(cfg))
    if cfg["sweep_specs"] is not None:
        specs = [ModelSpec.from_dict(d) for d in cfg["sweep_specs"]] if isinstance(cfg["sweep_specs"], list) \
            else specs[: int(cfg["sweep_specs"])]
    bundle = _bundle(cfg)
    try:
        rep = run_sweep(bundle, specs, cfg["B"], cfg["n_ensemble"], cfg["seed"], cfg["k"], cfg["workers"])
    except SweepFailure as e:
        e.report.to_csv(out / "sweep.csv")
        e.report.write_manifest(out / "sweep_manifest.json")
        raise
    rep.to_csv(out / "sweep.csv")
    rep.write_manifest(out / "sweep_manifest.json")
    return rep.summary()


def cmd_report(cfg, out):
    from tfpacc.report import write_report

    return write_report(cfg, _bundle(cfg), model_spec(cfg), out)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------- manifest / main

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy

    return {"tfpacc": tfpacc.__version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": scipy.__version__}


def write_manifest(out, command, cfg, timings, result):
    artifacts = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
                 if p.is_file() and not p.name.startswith("manifest_")}
    _write_json({"command": command, "config": cfg, "config_hash": config_hash(cfg),
                 "versions": _versions(), "timings": timings, "artifacts": artifacts,
                 "result": result}, out / f"manifest_{command}.json")


def run(command, cfg):
    """Execute one command with a resolved configuration; returns the result dict."""
    validate_inputs(cfg, command)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = HANDLERS[command](cfg, out)
    timings = {command: round(time.perf_counter() - t0, 6)}
    write_manifest(out, command, cfg, timings, result)
    return result


def _emit_error(exc, code):
    kind = type(exc).__name__
    msg = {"error": kind, "exit_code": code, "message": str(exc)}
    print(json.dumps(msg), file=sys.stderr)


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            raise ConfigError("usage: a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        result = run(args.command, cfg)
        print(json.dumps({"command": args.command, "out": cfg["out"], "result": result},
                         default=_json_default, sort_keys=True))
        return 0
    except ConfigError as e:
        _emit_error(e, 1)
        return 1
    except DataValidationError as e:
        _emit_error(e, 2)
        return 2
    except (NumericalError, TfpAccError, ArithmeticError, np.linalg.LinAlgError) as e:
        _emit_error(e, 3)
        return 3
    except (OSError, KeyError, ValueError) as e:
        _emit_error(e, 2)
        return 2


if __name__ == "__main__":
    sys.exit(main())
