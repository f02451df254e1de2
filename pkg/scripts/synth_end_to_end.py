"""Generate a synthetic world and drive every CLI stage over it.

    python3 scripts/synth_end_to_end.py --out runs/e2e --seed 3

Prints the fitted coefficients next to the truth and the 2020 headline.
"""
import argparse
import json
import sys
from pathlib import Path

from tfpacc.cli import main


def stage(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(f"stage {argv[0]} failed with exit code {code}")


def run(out, seed, synth, B, R, n_ensemble, sweep_specs):
    w = out / "world"
    g = w / "grids"
    s = ["--seed", seed]
    stage("synth", *s, "--out", w, "--set", f"synth={json.dumps(synth)}")
    common = ["--input", f"mask={w / 'mask.json'}", "--input", f"weights.cropland={g / 'cropland.grd'}",
              "--input", f"weights.cropland_pasture={g / 'cropland_pasture.grd'}"]
    obs = [a for v in ("tmean", "tmin", "tmax", "precip") for a in ("--input", f"obs.{v}={g / f'obs_{v}.grd'}")]
    stage("season", *s, "--out", out / "season", "--input", f"ndvi={g / 'ndvi.grd'}", *common)
    stage("ingest", *s, "--out", out / "prep", "--input", f"tfp={w / 'tfp.csv'}", "--input",
          f"output={w / 'output.csv'}", "--input", f"meta={w / 'meta.csv'}",
          "--input", f"season_map={out / 'season'}", *common, *obs)
    stage("downscale", *s, "--out", out / "prep", "--input", f"gcm_manifest={w / 'gcm' / 'manifest.json'}",
          "--input", f"season_map={out / 'season'}", *common, *obs)
    data = ["--input", f"data={out / 'prep'}"]
    stage("fit", *s, "--out", out / "fit", *data)
    stage("bootstrap", *s, "--out", out / "bootstrap", *data, "-B", B)
    stage("placebo", *s, "--out", out / "placebo", *data, "-R", R, "--mode", "both")
    stage("cv", *s, "--out", out / "cv", *data)
    stage("impact", *s, "--out", out / "impact", *data, "--input", f"bootstrap={out / 'bootstrap'}",
          "--n-ensemble", n_ensemble)
    stage("sweep", *s, "--out", out / "sweep", *data, "-B", max(10, B // 10), "--n-ensemble", 200, "-k", 5,
          "--set", f"sweep_specs={sweep_specs}")
    stage("report", *s, "--out", out / "report", *data, "--input", f"bootstrap={out / 'bootstrap'}",
          "--input", f"placebo={out / 'placebo'}", "--input", f"impact={out / 'impact'}",
          "--input", f"sweep={out / 'sweep'}")

    truth = json.loads((w / "truth.json").read_text())["beta"]
    coef = json.loads((out / "fit" / "fit.json").read_text())["coefficients"]
    print("\nterm   truth      estimate")
    for k, v in truth.items():
        print(f"{k:5s} {v:9.5f} {coef[k]:11.5f}")
    h = json.loads((out / "impact" / "summary.json").read_text())["headline"]
    print(f"\n2020 impact {h['mean_pct']:.1f}% (90% CI {h['ci90_pct'][0]:.1f} to {h['ci90_pct'][1]:.1f}), "
          f"years lost {h['years_lost_mean_path']}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/e2e"))
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--countries", type=int, default=20)
    ap.add_argument("--trend", type=float, default=0.2, help="forced warming, degC per decade")
    ap.add_argument("--B", type=int, default=200)
    ap.add_argument("--R", type=int, default=500)
    ap.add_argument("--n-ensemble", type=int, default=1000)
    ap.add_argument("--sweep-specs", type=int, default=200, help="run the first N sweep specs")
    a = ap.parse_args()
    run(a.out, a.seed, {"n_countries": a.countries, "trend": a.trend}, a.B, a.R, a.n_ensemble, a.sweep_specs)
