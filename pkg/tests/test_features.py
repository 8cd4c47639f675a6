import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mortregime.features import (DailyRegionalSeries, FeatureFrame, build_features,
                                 climatology, hinge_q75, lag_average, raw_parents,
                                 population_weighted_series, seasonal_anomaly,
                                 temperature_anomalies, threshold_indices)
from mortregime.panel import build_week_index
from oracles import quantile_linear


def grid_frame(cells):
    rows = []
    for cell_id, region, date, temp in cells:
        rows.append({"cell_id": cell_id, "region": region, "latitude": 0.0,
                     "longitude": 0.0, "date": date, "temperature": temp})
    return pd.DataFrame(rows)


def test_population_weighted_mean():
    grid = grid_frame([("c1", "A", "2020-01-01", 10.0), ("c2", "A", "2020-01-01", 20.0)])
    weights = pd.DataFrame({"cell_id": ["c1", "c2"], "population": [1.0, 3.0]})
    series = population_weighted_series(grid, weights)
    assert series.values[0, 0] == pytest.approx(17.5)


def test_population_weighted_single_cell_identity():
    grid = grid_frame([("c1", "A", "2020-01-01", 12.25)])
    weights = pd.DataFrame({"cell_id": ["c1"], "population": [7.0]})
    series = population_weighted_series(grid, weights)
    assert series.values[0, 0] == pytest.approx(12.25)


def test_population_weighted_three_cells():
    grid = grid_frame([("c1", "A", "2020-01-01", 0.0), ("c2", "A", "2020-01-01", 10.0),
                       ("c3", "A", "2020-01-01", 20.0)])
    weights = pd.DataFrame({"cell_id": ["c1", "c2", "c3"], "population": [2.0, 3.0, 5.0]})
    series = population_weighted_series(grid, weights)
    assert series.values[0, 0] == pytest.approx(13.0)


def test_population_weighted_zero_weight_region_rejected():
    grid = grid_frame([("c1", "A", "2020-01-01", 10.0)])
    weights = pd.DataFrame({"cell_id": ["c1"], "population": [0.0]})
    with pytest.raises(ValueError, match="zero total population"):
        population_weighted_series(grid, weights)


def test_cell_in_two_regions_rejected():
    grid = grid_frame([("c1", "A", "2020-01-01", 10.0), ("c1", "B", "2020-01-01", 10.0)])
    weights = pd.DataFrame({"cell_id": ["c1"], "population": [1.0]})
    with pytest.raises(ValueError, match="more than one region"):
        population_weighted_series(grid, weights)


def daily_series(values, start=(2020, 1)):
    """(R, n_days) array aligned to the Monday of the given ISO week."""
    wi = build_week_index(start, start)
    return DailyRegionalSeries(tuple(f"R{i}" for i in range(values.shape[0])),
                               wi.monday_of(1), values)


def test_threshold_indices_examples():
    wi = build_week_index((2020, 1), (2020, 2))
    # Region with 2 hot days in week 1, none in week 2.
    vals = np.full((1, 14), 10.0)
    vals[0, 0:2] = 30.0
    series = daily_series(vals)
    hi, ci, _ = threshold_indices(series, wi, thresholds=(np.array([20.0]), np.array([0.0])))
    assert hi[0, 0] == pytest.approx(2 / 7)
    assert hi[0, 1] == 0.0

    cold = daily_series(np.full((1, 14), -10.0))
    hi2, ci2, _ = threshold_indices(cold, wi, thresholds=(np.array([20.0]), np.array([0.0])))
    assert np.all(ci2 == 1.0) and np.all(hi2 == 0.0)


def test_constant_series_gives_zero_indices():
    wi = build_week_index((2020, 1), (2020, 2))
    series = daily_series(np.full((1, 14), 5.0))
    hi, ci, thr = threshold_indices(series, wi)
    assert np.all(hi == 0.0) and np.all(ci == 0.0)  # strict inequalities
    assert thr[0][0] == thr[1][0] == 5.0


def test_partial_week_rejected():
    wi = build_week_index((2020, 1), (2020, 2))
    series = daily_series(np.full((1, 13), 5.0))
    with pytest.raises(ValueError, match="whole ISO weeks"):
        threshold_indices(series, wi)


def test_hi_plus_ci_at_most_one():
    rng = np.random.default_rng(0)
    wi = build_week_index((2019, 1), (2019, 52))
    series = daily_series(rng.normal(12.0, 8.0, (3, 364)), start=(2019, 1))
    hi, ci, _ = threshold_indices(series, wi)
    assert np.all(hi + ci <= 1.0 + 1e-12)


def test_temperature_anomalies_examples():
    wi = build_week_index((2020, 1), (2020, 1))
    base = np.full((1, 366), 10.0)
    obs = daily_series(np.full((1, 7), 10.0))
    assert np.allclose(temperature_anomalies(obs, base, wi), 0.0)

    obs3 = daily_series(np.full((1, 7), 13.0))
    assert np.allclose(temperature_anomalies(obs3, base, wi), 3.0)

    dev = np.array([[1.0, 2.0, 0.0, 0.0, 0.0, -1.0, -2.0]]) + 10.0
    obs_mix = daily_series(dev)
    assert temperature_anomalies(obs_mix, base, wi)[0, 0] == pytest.approx(0.0)


def test_climatology_smoothing_and_leap_slot():
    wi = build_week_index((2019, 1), (2019, 1))
    n = 366 * 2
    vals = np.ones((1, n)) * 4.0
    series = DailyRegionalSeries(("A",), dt.date(2019, 1, 1), vals)
    clim = climatology(series)
    assert clim.shape == (1, 366)
    assert np.allclose(clim, 4.0)
    assert clim[0, 365] == clim[0, 364]


def test_seasonal_anomaly_examples():
    wi = build_week_index((2019, 1), (2020, 52))
    T = wi.T
    vals = np.full((1, T), 3.0)
    anom, norm = seasonal_anomaly(vals, wi)
    assert np.allclose(anom, 0.0)

    # Two years with values 2 then 4 on every ISO-week slot.
    vals2 = np.where(wi.iso_years == 2019, 2.0, 4.0)[None, :]
    anom_loo, _ = seasonal_anomaly(vals2, wi, exclude_self=True)
    assert np.allclose(anom_loo[0, wi.iso_years == 2019], -2.0)
    assert np.allclose(anom_loo[0, wi.iso_years == 2020], 2.0)

    anom_in, _ = seasonal_anomaly(vals2, wi, exclude_self=False)
    assert np.allclose(anom_in[0, wi.iso_years == 2019], -1.0)
    assert np.allclose(anom_in[0, wi.iso_years == 2020], 1.0)


def test_seasonal_anomaly_single_year_exclude_self_rejected():
    wi = build_week_index((2019, 1), (2019, 52))
    with pytest.raises(ValueError, match="single observed year"):
        seasonal_anomaly(np.ones((1, wi.T)), wi, exclude_self=True)


def test_lag_average_examples():
    vals = np.arange(1.0, 7.0)[None, :]
    out, avail = lag_average(vals, (0,))
    assert np.allclose(out, vals) and avail.all()

    vals2 = np.array([[0.1, 0.2, 0.3, 0.2, 0.4]])
    out2, _ = lag_average(vals2, (0, 1))
    assert out2[0, 4] == pytest.approx(0.3)

    vals3 = np.array([[1.0, 2.0, 3.0, 4.0]])
    out3, avail3 = lag_average(vals3, (2, 3))
    assert out3[0, 3] == pytest.approx(1.5)
    assert not avail3[0, :3].any() and avail3[0, 3]
    assert np.isnan(out3[0, 0])


def test_hinge_q75_oracle_and_boundary():
    vals = np.arange(1.0, 9.0)[None, :]
    out, q = hinge_q75(vals)
    assert q[0] == pytest.approx(quantile_linear(vals[0], 0.75)) == pytest.approx(6.25)
    assert out[0, 7] == pytest.approx(1.75)
    assert out[0, 5] == 0.0  # 6 < 6.25

    below = np.full((1, 8), 2.0)
    out2, q2 = hinge_q75(below)
    assert np.all(out2 == 0.0)

    exact = np.full((1, 4), 1.0)
    out3, _ = hinge_q75(exact)
    assert np.all(out3 == 0.0)


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=30))
@settings(max_examples=50, deadline=None)
def test_hinge_nonnegative_and_monotone(values):
    vals = np.array(values)[None, :]
    out, q = hinge_q75(vals)
    assert np.all(out >= 0.0)
    shifted, _ = hinge_q75(vals + 1.0, q75=q)
    assert np.all(shifted >= out - 1e-12)


@pytest.fixture()
def raw_world():
    rng = np.random.default_rng(7)
    wi = build_week_index((2018, 1), (2019, 52))
    T = wi.T
    n_days = T * 7
    start = wi.monday_of(1)
    doy = np.array([(start + dt.timedelta(days=i)).timetuple().tm_yday
                    for i in range(n_days)])
    seasonal = 12.0 + 9.0 * np.cos(2 * np.pi * (doy - 200) / 365.0)
    temps = seasonal[None, :] + rng.normal(0, 3.0, (2, n_days))
    temp = DailyRegionalSeries(("A", "B"), start, temps)
    ili = np.clip(rng.normal(1.0, 0.5, (2, T)) +
                  2.0 * (np.cos(2 * np.pi * (wi.iso_weeks - 2) / 52.0) > 0.8), 0, None)
    ha = np.zeros((2, T))
    ha[:, 60:70] = rng.uniform(0.1, 0.5, (2, 10))
    return temp, ili, ha, wi


def test_build_features_deterministic_and_complete(raw_world):
    temp, ili, ha, wi = raw_world
    with pytest.warns(UserWarning, match="lag history"):
        frame1, art1 = build_features(temp, ili, ha, wi)
        frame2, _ = build_features(temp, ili, ha, wi)
    for name in frame1.names:
        a, b = frame1.columns[name], frame2.columns[name]
        assert np.array_equal(np.nan_to_num(a), np.nan_to_num(b))
    expected = {"HI", "CI", "TA", "IA", "HA", "TA_lag1", "TA_lag2", "HI_lag1",
                "HI_lag2", "IA_avg01", "IA_avg23", "CI_avg01", "CI_avg23",
                "HA_avg01", "HA_avg23", "IA_avg01_hinge75", "IA_avg23_hinge75",
                "HA_avg01_hinge75", "HA_avg23_hinge75"}
    assert expected <= set(frame1.names)


def test_standardize_roundtrip_and_metadata(raw_world):
    temp, ili, ha, wi = raw_world
    with pytest.warns(UserWarning):
        frame, art = build_features(temp, ili, ha, wi)
    assert "TA" in frame.scalers
    raw = frame.destandardize("TA")
    mean, scale = frame.scalers["TA"]
    back = (raw - mean) / scale
    assert np.nanmax(np.abs(back - frame.columns["TA"])) < 1e-12
    ok = frame.available("TA")
    assert abs(frame.columns["TA"][ok].mean()) < 1e-12


def test_matrix_unavailable_cells(raw_world):
    temp, ili, ha, wi = raw_world
    with pytest.warns(UserWarning):
        frame, _ = build_features(temp, ili, ha, wi)
    with pytest.raises(ValueError, match="unavailable"):
        frame.matrix(("IA_avg23",))
    filled = frame.matrix(("IA_avg23",), fill_unavailable=0.0)
    assert np.isfinite(filled).all()
    with pytest.raises(ValueError, match="no columns"):
        frame.matrix(("nope",))


def test_frame_save_load_roundtrip(raw_world, tmp_path):
    temp, ili, ha, wi = raw_world
    with pytest.warns(UserWarning):
        frame, _ = build_features(temp, ili, ha, wi)
    path = tmp_path / "features.csv"
    spath = tmp_path / "scalers.json"
    frame.save(path, spath)
    back = FeatureFrame.load(path, spath)
    assert set(back.names) == set(frame.names)
    for name in frame.names:
        a = np.where(frame.available(name), frame.columns[name], 0.0)
        b = np.where(back.available(name), back.columns[name], 0.0)
        assert np.allclose(a, b, atol=1e-12)
    assert back.scalers == frame.scalers


def test_scenario_history_gives_full_lag_coverage(raw_world):
    temp, ili, ha, wi = raw_world
    with pytest.warns(UserWarning):
        frame, art = build_features(temp, ili, ha, wi)
    # Re-run the last 20 weeks as a pseudo-horizon with frozen artifacts.
    h_wi = build_week_index((2019, 33), (2019, 52))
    offset = (h_wi.monday_of(1) - temp.start).days
    h_temp = DailyRegionalSeries(temp.regions, h_wi.monday_of(1),
                                 temp.values[:, offset:offset + h_wi.T * 7].copy())
    hist = raw_parents(frame)
    hist = {k: v[:, wi.index_of(2019, 30) - 1:wi.index_of(2019, 32)] for k, v in hist.items()}
    h_frame, _ = build_features(h_temp, ili[:, -h_wi.T:], ha[:, -h_wi.T:], h_wi,
                                artifacts=art, history=hist)
    for name in h_frame.names:
        assert h_frame.available(name).all(), name
    # Frozen scalers match the calibration metadata.
    assert h_frame.scalers == art.scalers
