import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tfpacc.counterfactual import (
    aggregate_regions,
    crossing_year,
    cumulative_impact,
    ensemble_impacts,
    format_years,
    level_path,
    pct,
    project_and_level,
    project_growth,
    scenario_anomalies,
    summarize,
    write_outputs,
    years_lost,
)
from tfpacc.downscale import ScenarioMember, ScenarioSet
from tfpacc.errors import DataValidationError, DomainError
from tfpacc.inference import BootstrapEnsemble
from tfpacc.synth import make_scenario_set

TERMS = ["dT", "dT2", "dP", "dP2"]


def anom(dt, dp=None, first=1962):
    n = len(dt)
    return pd.DataFrame({"year": np.arange(first, first + n), "tmean": dt,
                         "precip": np.zeros(n) if dp is None else dp})


def fake_ensemble(coefs, names=TERMS, groups=None, spec=None):
    coefs = np.atleast_2d(np.asarray(coefs, float))
    return BootstrapEnsemble(list(names), coefs, coefs.mean(axis=0), 0, groups=groups, spec=spec)


def meta_for(countries, regions=None, weights=None):
    n = len(countries)
    return pd.DataFrame({"country": countries, "region": regions or ["africa"] * n, "latitude": 0.0,
                         "revenue_weight": weights or [1.0 / n] * n})


# ---------------------------------------------------------------- impact formula

def test_running_sum_of_linear_term():
    I = cumulative_impact([-0.1, 0, 0, 0], anom([0.1, 0.2]), TERMS)
    np.testing.assert_allclose(I.to_numpy(), [-0.01, -0.03], atol=1e-15)


def test_running_sum_of_squared_term():
    I = cumulative_impact([0, -0.01, 0, 0], anom([1.0, 1.0]), TERMS)
    np.testing.assert_allclose(I.to_numpy(), [-0.01, -0.02], atol=1e-15)


def test_zero_anomalies_zero_impact():
    assert (cumulative_impact([1, 2, 3, 4], anom(np.zeros(5)), TERMS) == 0).all()


def test_precip_terms_use_thousands_of_mm():
    I = cumulative_impact([0, 0, 1.0, 1.0], anom([0.0], dp=[500.0]), TERMS)
    assert I.iloc[0] == pytest.approx(0.5 + 0.25)


def test_anomalies_against_without_forcing_baseline():
    ss = make_scenario_set(["A"], trend=0.0)
    ss.members["G1"].with_acc["tmean"] += 0.5
    a = scenario_anomalies(ss)["G1"]
    assert (a["with"]["tmean"] == 0.5).all() and (a["without"]["tmean"] == 0).all()
    I = cumulative_impact([0, 1.0, 0, 0], a["with"][a["with"]["country"] == "A"], TERMS)
    assert I.loc[1962] == pytest.approx(0.25)


def test_self_anomaly_and_missing_baseline():
    ss = make_scenario_set(["A", "B"], trend=0.0)
    a = scenario_anomalies(ss)["G1"]
    for k in ("with", "without"):
        assert (a[k][["tmean", "precip"]] == 0).all().all()
    ss.members["G1"].baseline = ss.members["G1"].baseline.iloc[:1]
    with pytest.raises(DataValidationError):
        scenario_anomalies(ss)


# ---------------------------------------------------------------- ensemble

def test_identical_worlds_give_zero_impact():
    ss = make_scenario_set(["A", "B"], gcms=("G1", "G2"), trend=0.0, noise=1.0)
    ie = ensemble_impacts(fake_ensemble(np.random.default_rng(0).normal(size=(5, 4))), ss, n=50, seed=1)
    assert ie.impacts.shape == (50, 2, 60)
    assert (ie.impacts == 0).all()


def test_linear_trend_closed_form():
    trend, b1 = 0.03, -0.05
    ss = make_scenario_set(["A"], trend=trend, noise=0.7, seed=2)
    ie = ensemble_impacts(fake_ensemble([[b1, 0, 0, 0]]), ss, n=3, seed=0)
    t = np.arange(1962, 2021)
    np.testing.assert_allclose(ie.impacts[0, 0, 1:], np.cumsum(b1 * trend * (t - 1961)), rtol=1e-12)
    assert ie.impacts[0, 0, 0] == 0.0


def test_quadratic_trend_closed_form_with_shared_noise():
    # (a + r)^2 - a^2 = 2 a r + r^2 with a the shared natural anomaly
    ss = make_scenario_set(["A"], trend=0.02, noise=0.5, seed=3)
    ie = ensemble_impacts(fake_ensemble([[0, -0.01, 0, 0]]), ss, n=1, seed=0)
    a = scenario_anomalies(ss)["G1"]
    w, wo = a["with"]["tmean"].to_numpy()[1:], a["without"]["tmean"].to_numpy()[1:]
    np.testing.assert_allclose(ie.impacts[0, 0, 1:], np.cumsum(-0.01 * (w ** 2 - wo ** 2)), rtol=1e-12)


def _swap(ss):
    return ScenarioSet({g: ScenarioMember(m.without_acc, m.with_acc, m.baseline) for g, m in ss.members.items()})


@given(st.integers(0, 10_000))
def test_antisymmetry_and_linearity(seed):
    r = np.random.default_rng(seed)
    ss = make_scenario_set(["A", "B", "C"], gcms=("G1", "G2"), trend=0.02, noise=1.0, seed=seed,
                           shared_noise=False)
    b1, b2 = r.normal(size=(4, 4)), r.normal(size=(4, 4))
    fwd = ensemble_impacts(fake_ensemble(b1), ss, n=20, seed=seed)
    back = ensemble_impacts(fake_ensemble(b1), _swap(ss), n=20, seed=seed)
    np.testing.assert_array_equal(back.impacts, -fwd.impacts)
    i2 = ensemble_impacts(fake_ensemble(b2), ss, n=20, seed=seed)
    isum = ensemble_impacts(fake_ensemble(b1 + b2), ss, n=20, seed=seed)
    np.testing.assert_allclose(isum.impacts, fwd.impacts + i2.impacts, atol=1e-12)


def test_pairs_are_seeded_and_uniform():
    ss = make_scenario_set(["A"], gcms=("G1", "G2", "G3"), trend=0.02)
    be = fake_ensemble(np.random.default_rng(0).normal(size=(10, 4)))
    a = ensemble_impacts(be, ss, n=3000, seed=7)
    b = ensemble_impacts(be, ss, n=3000, seed=7)
    np.testing.assert_array_equal(a.impacts, b.impacts)
    assert set(a.gcms) == {"G1", "G2", "G3"}
    counts = np.bincount(a.draw_ids, minlength=10)
    assert counts.min() > 200 and counts.max() < 400


def test_latitude_groups_pick_country_coefficients():
    ss = make_scenario_set(["A", "B"], trend=0.03)
    names = [f"{t}@g{k}" for k in range(3) for t in TERMS]
    coefs = np.zeros((1, 12))
    coefs[0, 0] = -0.1  # dT, group 0
    coefs[0, 8] = -0.2  # dT, group 2
    ie = ensemble_impacts(fake_ensemble(coefs, names, groups={"A": 0, "B": 2}), ss, n=1, seed=0)
    np.testing.assert_allclose(ie.impacts[0, 1], 2 * ie.impacts[0, 0], rtol=1e-12)


# ---------------------------------------------------------------- aggregation and levels

def test_two_country_weighted_mean():
    out = aggregate_regions(np.array([[-0.1], [-0.3]]), ["A", "B"], meta_for(["A", "B"], weights=[0.5, 0.5]))
    assert out["global"][0] == pytest.approx(-0.2)


def test_single_country_region_equals_country():
    imp = np.random.default_rng(0).normal(size=(4, 2, 5))
    out = aggregate_regions(imp, ["A", "B"], meta_for(["A", "B"], regions=["africa", "lac"]))
    np.testing.assert_array_equal(out["lac"], imp[:, 1, :])


def test_zero_weight_region_is_an_error():
    with pytest.raises(DomainError):
        aggregate_regions(np.zeros((2, 3)), ["A", "B"], meta_for(["A", "B"], ["africa", "lac"], [1.0, 0.0]))


@given(st.integers(0, 10_000))
def test_aggregate_within_member_range(seed):
    r = np.random.default_rng(seed)
    imp = r.normal(size=(6, 5, 4))
    m = meta_for(list("ABCDE"), ["africa", "africa", "lac", "lac", "asia"], list(r.random(5) + 0.01))
    out = aggregate_regions(imp, list("ABCDE"), m)
    assert (out["global"] <= imp.max(axis=1) + 1e-12).all()
    assert (out["global"] >= imp.min(axis=1) - 1e-12).all()


def test_projection_uses_last_decade_mean():
    g = pd.DataFrame({"country": "A", "year": np.arange(1962, 2016), "dln_tfp": np.r_[np.zeros(44), np.arange(10.0)]})
    p = project_growth(g)
    assert p["year"].max() == 2020
    np.testing.assert_allclose(p[p["year"] > 2015]["dln_tfp"], 4.5)


def test_zero_impact_level_equals_observed():
    g = np.r_[0.0, np.full(59, 0.01)]
    obs, cf = level_path(g, np.zeros((3, 60)), np.arange(1961, 2021))
    np.testing.assert_array_equal(cf, np.broadcast_to(obs, cf.shape))
    assert obs[1] == 100.0


def test_constant_per_year_impact_ratio():
    years = np.arange(1961, 2021)
    delta = -0.004
    acc = delta * (years - 1961)
    obs, cf = level_path(np.r_[0.0, np.full(59, 0.015)], acc, years)
    np.testing.assert_allclose(obs / cf, np.exp(delta * (years - 1961)), rtol=1e-12)


def test_level_formula_recovers_impacts(world_small):
    growth, ie, meta = world_small
    lv = project_and_level(growth, ie, meta, countries_too=True)
    for u in ["global"] + ie.countries[:2]:
        rec = np.log(lv.observed[u]) - np.log(lv.counterfactual[u])
        np.testing.assert_allclose(-rec, -lv.impacts[u], atol=1e-10)


@pytest.fixture
def world_small():
    countries = ["A", "B", "C"]
    ss = make_scenario_set(countries, gcms=("G1", "G2"), trend=0.03, noise=0.5, seed=1)
    be = fake_ensemble(np.random.default_rng(1).normal([-0.02, -0.002, 0.1, -0.5], 0.005, size=(30, 4)))
    ie = ensemble_impacts(be, ss, n=200, seed=2)
    r = np.random.default_rng(3)
    growth = pd.DataFrame([(c, y, 0.02 + r.normal(0, 0.01)) for c in countries for y in range(1962, 2016)],
                          columns=["country", "year", "dln_tfp"])
    return growth, ie, meta_for(countries, ["africa", "lac", "lac"], [0.2, 0.3, 0.5])


# ---------------------------------------------------------------- years lost

def test_years_lost_constant_growth_closed_form():
    years = np.arange(1961, 2021)
    g = np.r_[0.0, np.full(59, 0.02)]
    obs, cf = level_path(g, np.full(60, -0.18), years)
    assert years_lost(obs[-1], cf, years) == pytest.approx(9.0, abs=1e-9)


def test_zero_impact_loses_no_years():
    years = np.arange(1961, 2021)
    obs, cf = level_path(np.r_[0.0, np.full(59, 0.01)], np.zeros(60), years)
    assert years_lost(obs[-1], cf, years) == pytest.approx(0.0, abs=1e-12)


def test_no_crossing_reported_as_open_interval():
    years = np.arange(1961, 2021)
    obs, cf = level_path(np.r_[0.0, np.full(59, 0.01)], np.full(60, 0.5), years)
    v = years_lost(obs[-1], cf, years)
    assert math.isinf(v) and format_years(v) == ">58 years"


def test_crossing_interpolates_and_takes_earliest():
    assert crossing_year([2000, 2001, 2002], [1.0, 3.0, 2.0], 2.0) == pytest.approx(2000.5)


# ---------------------------------------------------------------- summary and files

def test_summary_and_outputs(tmp_path, world_small):
    growth, ie, meta = world_small
    lv = project_and_level(growth, ie, meta)
    s = summarize(ie, lv)
    h = s["headline"]
    k = -1
    assert h["mean_log"] == pytest.approx(lv.impacts["global"][:, k].mean())
    assert h["mean_pct"] == pytest.approx(pct(h["mean_log"]))
    assert h["ci90_log"][0] <= h["mean_log"] <= h["ci90_log"][1]
    assert set(s["units"]) == {"global", "africa", "lac"}
    write_outputs(tmp_path, ie, lv, s)
    imp = pd.read_csv(tmp_path / "impacts.csv")
    assert list(imp.columns) == ["member_id", "draw_id", "gcm", "unit", "year", "impact"]
    assert len(imp) == ie.n * len(ie.years) * 3
    assert json.loads((tmp_path / "summary.json").read_text())["n"] == 200
    write_outputs(tmp_path / "all", ie, lv, s, all_members=True)
    assert len(pd.read_csv(tmp_path / "all" / "impacts.csv")) == ie.n * len(ie.years) * 6
