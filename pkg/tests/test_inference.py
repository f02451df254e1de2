import numpy as np
import pytest

import tfpacc.inference as inf
from tfpacc.econ import BASELINE, build_design, cumulative_lag_test, slope_change_test
from tfpacc.errors import DataValidationError, NumericalError, RankDeficiencyError
from tfpacc.inference import (
    BootstrapEnsemble,
    block_bootstrap,
    bootstrap_design,
    kfold_cv,
    percentile_ci,
    placebo_percentile,
    placebo_test,
)
from tfpacc.synth import simulate_regtable

LINEAR_T = BASELINE.replace(precip="exclude", form="linear")


def test_percentile_ci_uses_interpolated_order_statistics():
    x = np.arange(101.0)
    lo, hi = percentile_ci(x, 0.90)
    assert (lo, hi) == (5.0, 95.0)
    lo, hi = percentile_ci(np.arange(11.0), 0.95)
    assert lo == pytest.approx(0.25) and hi == pytest.approx(9.75)


def test_placebo_percentile_mid_rank():
    pct, p = placebo_percentile(np.array([[1.0], [2.0], [3.0], [4.0]]), np.array([2.0]))
    assert pct[0] == pytest.approx(100 * (1 + 0.5) / 4)
    assert p[0] == pytest.approx(2 * 37.5 / 100)


# ---------------------------------------------------------------- bootstrap

def test_single_block_reproduces_sample_fit():
    rt = simulate_regtable(seed=1, n_regions=1)
    design = build_design(rt, BASELINE)
    be = bootstrap_design(design, B=5, seed=0, block_keys=("region",))
    for row in be.coefs:
        np.testing.assert_array_equal(row, be.sample)


def test_bootstrap_is_deterministic_across_workers():
    rt = simulate_regtable(seed=2)
    a = block_bootstrap(rt, BASELINE, B=24, seed=99, workers=1)
    b = block_bootstrap(rt, BASELINE, B=24, seed=99, workers=2)
    np.testing.assert_array_equal(a.coefs, b.coefs)
    c = block_bootstrap(rt, BASELINE, B=24, seed=100)
    assert not np.array_equal(a.coefs, c.coefs)
    assert a.B == 24 and a.coefs.shape[1] == 4


def test_rank_deficient_draws_are_redrawn():
    # one regressor lives in a single year-region block
    rt = simulate_regtable(seed=3, n_countries=8, n_years=10, precip=False, form="linear")
    d = rt.data.copy()
    d.loc[~((d["year"] == 1965) & (d["region"] == d["region"].iloc[0])), "dT"] = 0.0
    design = build_design(type(rt)(d, rt.tvar, rt.precip, rt.form), LINEAR_T)
    be = bootstrap_design(design, B=30, seed=1)
    assert be.B == 30 and be.redraws > 0


def test_redraw_cap_raises(monkeypatch):
    rt = simulate_regtable(seed=3)
    design = build_design(rt, BASELINE)

    def always_deficient(design, w):
        raise RankDeficiencyError(design.names)

    monkeypatch.setattr(inf, "_beta_for_weights", always_deficient)
    with pytest.raises(NumericalError, match="cap"):
        bootstrap_design(design, B=3, seed=0)


def test_bootstrap_files_round_trip(tmp_path):
    be = block_bootstrap(simulate_regtable(seed=4), BASELINE.replace(hetero="lat3"), B=10, seed=5)
    be.to_csv(tmp_path / "b.csv")
    be.write_summary(tmp_path / "b.json")
    back = BootstrapEnsemble.read(tmp_path / "b.csv", tmp_path / "b.json")
    np.testing.assert_array_equal(back.coefs, be.coefs)
    np.testing.assert_array_equal(back.sample, be.sample)
    assert back.groups == be.groups and back.spec == be.spec and back.seed == 5
    s = be.summary()["terms"]["dT@g0"]
    assert s["ci90"] == pytest.approx(list(percentile_ci(be.coefs[:, 0], 0.90)))


# ---------------------------------------------------------------- placebo

@pytest.mark.parametrize("mode", ["year", "country"])
def test_identity_permutation_reproduces_sample(mode):
    rt = simulate_regtable(seed=6, beta={"dT": -0.05})
    n = rt.data["year" if mode == "year" else "country"].nunique()
    pl = placebo_test(rt, BASELINE, mode, R=2, seed=0, force_permutation=np.arange(n))
    for row in pl.coefs:
        np.testing.assert_array_equal(row, pl.sample)


def test_placebo_is_deterministic_and_needs_three_labels():
    rt = simulate_regtable(seed=7)
    a = placebo_test(rt, BASELINE, "year", R=20, seed=3)
    b = placebo_test(rt, BASELINE, "year", R=20, seed=3, workers=2)
    np.testing.assert_array_equal(a.coefs, b.coefs)
    small = simulate_regtable(seed=7, n_years=2)
    with pytest.raises(DataValidationError):
        placebo_test(small, BASELINE, "year", R=5)


def test_signal_falls_outside_placebo_distribution():
    rt = simulate_regtable(seed=8, beta={"dT": -0.05}, precip=False, form="linear")
    for mode in ("year", "country"):
        pl = placebo_test(rt, LINEAR_T, mode, R=200, seed=1)
        assert pl.percentile[0] < 2.5


def test_placebo_leaves_tfp_side_untouched():
    rt = simulate_regtable(seed=9)
    pl = placebo_test(rt, BASELINE, "country", R=50, seed=2)
    assert pl.coefs.shape == (50, 4)
    # permuted weather keeps the same marginal regressor distribution
    assert np.isfinite(pl.coefs).all()


# ---------------------------------------------------------------- cross-validation

def test_k_larger_than_years_is_an_error():
    with pytest.raises(DataValidationError):
        kfold_cv(simulate_regtable(seed=1, n_years=5), BASELINE, k=10)


def test_duplicated_columns_leave_reduction_unchanged():
    rt = simulate_regtable(seed=10, beta={"dT": -0.03, "dT2": -0.01})
    design = build_design(rt, BASELINE)
    dup = design.with_columns(np.column_stack([design.X, design.X[:, :2]]), design.names + ["dTx", "dT2x"])
    a = kfold_cv(rt, BASELINE, 10, seed=4, design=design)
    b = kfold_cv(rt, BASELINE, 10, seed=4, design=dup)
    assert b.reduction == pytest.approx(a.reduction, abs=1e-10)


def test_cv_null_and_signal_worlds():
    null, signal = [], []
    for s in range(50):
        rt0 = simulate_regtable(seed=1000 + s, noise=0.02)
        null.append(kfold_cv(rt0, BASELINE, 10, seed=s).reduction)
        rt1 = simulate_regtable(seed=2000 + s, noise=0.02, beta={"dT": -0.01, "dT2": -0.01})
        signal.append(kfold_cv(rt1, BASELINE, 10, seed=s).reduction)
    assert abs(np.mean(null)) < 0.01
    assert np.mean(np.array(signal) > 0) >= 0.95


# ---------------------------------------------------------------- Monte Carlo calibration

@pytest.mark.slow
def test_lag_test_calibrated_under_contemporaneous_only_effect():
    keep = []
    for s in range(200):
        rt = simulate_regtable(seed=3000 + s, n_countries=12, n_years=24, beta={"dT": -0.05},
                               precip=False, form="linear")
        res = cumulative_lag_test(rt, LINEAR_T, 10, B=100, seed=s)
        keep.append(res.pvalue["T"] > 0.05)
    assert abs(np.mean(keep) - 0.95) <= 0.05


@pytest.mark.slow
def test_slope_test_size_and_power():
    null, power = [], []
    for s in range(100):
        rt = simulate_regtable(seed=4000 + s, n_countries=20, n_years=54, precip=False, form="linear",
                               beta={"dT": -0.02})
        null.append(slope_change_test(rt, LINEAR_T, 1989, B=100, seed=s).pvalue < 0.05)
        d = rt.data.copy()
        d["dln_tfp"] += np.where(d["year"] < 1989, -0.01, -0.03) * d["dT"]
        rt2 = type(rt)(d, rt.tvar, rt.precip, rt.form)
        power.append(slope_change_test(rt2, LINEAR_T, 1989, B=100, seed=s).pvalue < 0.05)
    assert np.mean(null) <= 0.10
    assert np.mean(power) >= 0.5
