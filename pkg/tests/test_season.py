import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tfpacc.errors import DataValidationError
from tfpacc.gridops import CountryMask, GridField, GridSpec
from tfpacc.season import (
    NBINS,
    bin_midpoint_days,
    bin_to_month,
    country_green_month,
    greenest_month_cell,
    ndvi_climatology,
    read_season_map,
    season_months,
    seasonal_aggregate,
    write_season_map,
)


def test_bin_to_month_covers_calendar():
    m = bin_to_month()
    assert len(m) == NBINS and m[0] == 1 and m[-1] == 12
    assert sorted(set(m.tolist())) == list(range(1, 13))


def test_constant_climatology_stays_constant():
    clim = ndvi_climatology(np.full((3, NBINS, 2), 0.5))
    np.testing.assert_allclose(clim, 0.5, atol=1e-15)


def test_spike_spreads_over_seven_bins():
    s = np.zeros((1, NBINS))
    s[0, 10] = 1.0
    clim = ndvi_climatology(s)
    expected = np.zeros(NBINS)
    expected[7:14] = 1.0 / 7.0
    np.testing.assert_allclose(clim, expected, atol=1e-15)


def test_spike_wraps_around_year_end():
    s = np.zeros((1, NBINS))
    s[0, 0] = 7.0
    clim = ndvi_climatology(s)
    assert set(np.flatnonzero(clim).tolist()) == {21, 22, 23, 0, 1, 2, 3}


def test_two_identical_years_average_to_either():
    y = np.random.default_rng(0).random(NBINS)
    np.testing.assert_allclose(ndvi_climatology(np.stack([y, y]), window=1), y)


def test_all_missing_cell_is_missing():
    s = np.full((2, NBINS, 1), np.nan)
    assert np.isnan(ndvi_climatology(s)).all()
    assert greenest_month_cell(ndvi_climatology(s))[0] == 0


def test_sinusoid_peaking_mid_july():
    days = bin_midpoint_days()
    peak = 181 + 15  # mid July, 0-based day of year
    clim = np.cos(2 * np.pi * (days - peak) / 365.0)
    assert greenest_month_cell(clim) == 7


def test_flat_climatology_ties_to_january():
    assert greenest_month_cell(np.ones(NBINS)) == 1


def test_last_bin_maps_to_december():
    c = np.zeros(NBINS)
    c[-1] = 1.0
    assert greenest_month_cell(c) == 12


@given(st.integers(0, NBINS - 1), st.integers(0, 10_000))
def test_half_year_rotation_shifts_month_by_six(k, seed):
    r = np.random.default_rng(seed)
    clim = r.random(NBINS) * 0.1
    clim[k] = 1.0
    m = greenest_month_cell(clim)
    rolled = greenest_month_cell(np.roll(clim, NBINS // 2))
    assert rolled == (m + 5) % 12 + 1


def _mask(months, weights):
    n = len(months)
    s = GridSpec(0.5, 0.5, 1.0, 1.0, 1, n)
    return (np.array([months]), GridField(s, np.array([weights]), "weight"),
            CountryMask(s, np.zeros((1, n), int), ["A"]))


def test_unanimous_mode():
    cells, w, mask = _mask([7, 7, 7], [0.1, 0.5, 0.2])
    assert country_green_month(cells, w, mask) == {"A": 7}


def test_weighted_mode():
    cells, w, mask = _mask([6, 7], [0.4, 0.6])
    assert country_green_month(cells, w, mask)["A"] == 7


def test_weighted_tie_goes_to_earliest_month():
    cells, w, mask = _mask([7, 6], [0.5, 0.5])
    assert country_green_month(cells, w, mask)["A"] == 6


def test_donor_and_missing_donor():
    s = GridSpec(0.5, 0.5, 1.0, 1.0, 1, 2)
    mask = CountryMask(s, np.array([[0, 1]]), ["A", "B"])
    w = GridField(s, np.ones((1, 2)), "weight")
    cells = np.array([[4, 0]])
    assert country_green_month(cells, w, mask, donors={"B": "A"}) == {"A": 4, "B": 4}
    with pytest.raises(DataValidationError):
        country_green_month(cells, w, mask)


def test_season_map_csv_round_trip(tmp_path):
    write_season_map({"B": 3, "A": 11}, tmp_path / "s.csv")
    assert read_season_map(tmp_path / "s.csv") == {"A": 11, "B": 3}
    (tmp_path / "bad.csv").write_text("country,greenest_month\nA,13\n")
    with pytest.raises(DataValidationError):
        read_season_map(tmp_path / "bad.csv")


def _monthly(years, t=20.0, p=100.0):
    rows = [("A", y, m) for y in years for m in range(1, 13)]
    df = pd.DataFrame(rows, columns=["country", "year", "month"])
    df["tmean"] = t
    df["precip"] = p
    return df


def test_green_window_mean_and_sum():
    out = seasonal_aggregate(_monthly([2000, 2001, 2002]), {"A": 7})
    row = out[out["year"] == 2001].iloc[0]
    assert row["tmean"] == 20.0 and row["precip"] == 500.0


def test_january_window_wraps_into_previous_year():
    assert season_months(1, 2001) == [(2000, 11), (2000, 12), (2001, 1), (2001, 2), (2001, 3)]
    m = _monthly([2000, 2001])
    m["tmean"] = m["year"] * 100 + m["month"]
    out = seasonal_aggregate(m, {"A": 1}).set_index("year")
    assert list(out.index) == [2001]  # 2000 lacks Nov-Dec 1999 and is dropped
    assert out.loc[2001, "tmean"] == pytest.approx(np.mean([200011, 200012, 200101, 200102, 200103]))


def test_calendar_window_sum():
    out = seasonal_aggregate(_monthly([2005], p=50.0), window="calendar")
    assert out["precip"].iloc[0] == 600.0


@given(st.integers(1, 12), st.integers(0, 1000))
def test_seasonal_values_within_window_bounds(center, seed):
    r = np.random.default_rng(seed)
    m = _monthly([1999, 2000, 2001])
    m["tmean"] = r.normal(15, 5, len(m))
    m["precip"] = r.uniform(0, 200, len(m))
    out = seasonal_aggregate(m, {"A": center}).set_index("year")
    k = m.set_index(["year", "month"])
    y = 2000
    win = [k.loc[ym] for ym in season_months(center, y)]
    t = [w["tmean"] for w in win]
    assert min(t) - 1e-12 <= out.loc[y, "tmean"] <= max(t) + 1e-12
    assert out.loc[y, "precip"] == pytest.approx(sum(w["precip"] for w in win), abs=1e-9)


def test_missing_greenest_month_is_an_error():
    with pytest.raises(DataValidationError):
        seasonal_aggregate(_monthly([2000]), {})
