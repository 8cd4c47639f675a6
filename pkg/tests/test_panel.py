import datetime as dt

import numpy as np
import pandas as pd
import pytest

from mortregime.panel import (MortalityPanel, RegionGraph, WEEKS_PER_YEAR,
                              build_exposures, build_week_index, load_panel,
                              mask_weeks, weeks_in_iso_year)
from oracles import count_weeks, iso_label_of_day


def test_paper_window_has_600_weeks():
    wi = build_week_index((2013, 1), (2024, 26))
    assert wi.T == 600
    assert wi.year_of(1) == 2013 and wi.week_of(1) == 1
    assert wi.year_of(600) == 2024 and wi.week_of(600) == 26


def test_single_week_window():
    wi = build_week_index((2020, 1), (2020, 1))
    assert wi.T == 1
    assert wi.week_of(1) == 1 and wi.year_of(1) == 2020


def test_cross_year_window_against_day_counting_oracle():
    wi = build_week_index((2015, 10), (2016, 9))
    labels = count_weeks((2015, 10), (2016, 9))
    assert wi.T == len(labels) == 53
    assert wi.labels() == labels
    # 2015 is a 53-week ISO year, so the year turns over at t = 45.
    assert wi.week_of(44) == 53 and wi.year_of(44) == 2015
    assert wi.week_of(45) == 1 and wi.year_of(45) == 2016


@pytest.mark.parametrize("start,end", [((2013, 1), (2014, 30)), ((2019, 48), (2021, 5))])
def test_roundtrip_through_index(start, end):
    wi = build_week_index(start, end)
    for t in range(1, wi.T + 1):
        assert wi.index_of(wi.year_of(t), wi.week_of(t)) == t


def test_consecutive_weeks_differ_by_seven_days():
    wi = build_week_index((2020, 50), (2021, 4))
    mondays = [wi.monday_of(t) for t in range(1, wi.T + 1)]
    assert all((b - a).days == 7 for a, b in zip(mondays, mondays[1:]))


def test_invalid_week_53_rejected():
    # 2021 has 52 ISO weeks
    assert weeks_in_iso_year(2021) == 52
    assert weeks_in_iso_year(2020) == 53
    with pytest.raises(ValueError):
        build_week_index((2021, 53), (2022, 1))


def test_iso_week_rule_matches_oracle_across_days():
    day = dt.date(2014, 12, 20)
    for i in range(40):
        d = day + dt.timedelta(days=i)
        assert d.isocalendar()[:2] == iso_label_of_day(d)


def make_population(regions, ages, years, value):
    rows = [{"region": r, "age_group": a, "year": y,
             "population": value(r, a, y) if callable(value) else value}
            for r in regions for a in ages for y in years]
    return pd.DataFrame(rows)


def test_exposure_trivial_and_hand_values():
    wi = build_week_index((2020, 2), (2020, 10))
    pop = make_population(("A",), ("65+",), (2020, 2021), 104.36)
    E = build_exposures(pop, wi, ("A",), ("65+",))
    assert np.allclose(E, 2.0)

    pop2 = make_population(("A",), ("65+",), (2020, 2021),
                           lambda r, a, y: 1000.0 if y == 2020 else 1200.0)
    E2 = build_exposures(pop2, wi, ("A",), ("65+",))
    assert np.allclose(E2, 2200.0 / (2 * WEEKS_PER_YEAR))
    assert np.allclose(E2, 21.0809, atol=5e-5)


def test_exposure_constant_within_calendar_year():
    wi = build_week_index((2019, 50), (2020, 3))
    pop = make_population(("A",), ("65+",), (2019, 2020, 2021),
                          lambda r, a, y: {2019: 90.0, 2020: 110.0, 2021: 130.0}[y])
    E = build_exposures(pop, wi, ("A",), ("65+",))[0, 0]
    e19 = (90 + 110) / (2 * WEEKS_PER_YEAR)
    e20 = (110 + 130) / (2 * WEEKS_PER_YEAR)
    expected = [e19 if wi.year_of(t) == 2019 else e20 for t in range(1, wi.T + 1)]
    assert np.allclose(E, expected)


def test_missing_population_year_names_the_gap():
    wi = build_week_index((2020, 1), (2020, 5))
    pop = make_population(("A",), ("65+",), (2020,), 100.0)  # 2021 missing
    with pytest.raises(ValueError, match="year=2021"):
        build_exposures(pop, wi, ("A",), ("65+",))


def test_zero_population_rejected_downstream():
    wi = build_week_index((2020, 1), (2020, 4))
    pop = make_population(("A",), ("65+",), (2020, 2021), 0.0)
    E = build_exposures(pop, wi, ("A",), ("65+",))
    assert np.all(E == 0.0)
    with pytest.raises(ValueError, match="exposure"):
        MortalityPanel(("A",), ("65+",), wi, np.zeros((1, 1, 4), dtype=int), E)


@pytest.fixture()
def panel_files(tmp_path):
    regions = ["FR10", "FRB0", "FRC1"]
    ages = ["65-69", "70-74"]
    wi = build_week_index((2020, 1), (2020, 10))
    rng = np.random.default_rng(0)
    rows = []
    for r in regions:
        for a in ages:
            for t in range(1, wi.T + 1):
                rows.append({"region": r, "age_group": a, "iso_year": wi.year_of(t),
                             "iso_week": wi.week_of(t), "deaths": int(rng.poisson(20))})
    deaths = tmp_path / "deaths.csv"
    pd.DataFrame(rows).to_csv(deaths, index=False)
    pop = tmp_path / "population.csv"
    make_population(regions, ages, (2020, 2021), 5000.0).to_csv(pop, index=False)
    adj = tmp_path / "adjacency.csv"
    pd.DataFrame([{"region_a": "FR10", "region_b": "FRB0"},
                  {"region_a": "FRB0", "region_b": "FRC1"},
                  {"region_a": "FRB0", "region_b": "FRC1"}]).to_csv(adj, index=False)
    return deaths, pop, adj, wi


def test_load_panel_complete_grid_and_symmetry(panel_files):
    deaths, pop, adj, wi = panel_files
    panel, graph = load_panel(deaths, pop, adj, wi)
    assert panel.shape == (3, 2, 10)
    assert panel.deaths.size == 60
    assert graph.W[0, 1] == graph.W[1, 0] == 1
    assert graph.W[0, 2] == 0
    assert np.all(panel.weight_mask == 1)
    assert graph.connected


def test_load_panel_rejects_negative_deaths(panel_files, tmp_path):
    deaths, pop, adj, wi = panel_files
    df = pd.read_csv(deaths)
    df.loc[3, "deaths"] = -1
    bad = tmp_path / "bad.csv"
    df.to_csv(bad, index=False)
    with pytest.raises(ValueError, match="negative"):
        load_panel(bad, pop, adj, wi)


def test_load_panel_rejects_duplicates(panel_files, tmp_path):
    deaths, pop, adj, wi = panel_files
    df = pd.read_csv(deaths)
    dup = pd.concat([df, df.iloc[[0]]], ignore_index=True)
    bad = tmp_path / "dup.csv"
    dup.to_csv(bad, index=False)
    with pytest.raises(ValueError, match="duplicate"):
        load_panel(bad, pop, adj, wi)


def test_load_panel_rejects_incomplete_grid(panel_files, tmp_path):
    deaths, pop, adj, wi = panel_files
    df = pd.read_csv(deaths).iloc[1:]
    bad = tmp_path / "thin.csv"
    df.to_csv(bad, index=False)
    with pytest.raises(ValueError, match="incomplete"):
        load_panel(bad, pop, adj, wi)


def test_load_panel_region_mismatch(panel_files, tmp_path):
    deaths, pop, adj, wi = panel_files
    df = pd.read_csv(pop)
    bad = tmp_path / "pop.csv"
    df[df["region"] != "FRC1"].to_csv(bad, index=False)
    with pytest.raises(ValueError, match="FRC1"):
        load_panel(deaths, bad, adj, wi)


def test_adjacency_unknown_region_rejected(panel_files, tmp_path):
    deaths, pop, adj, wi = panel_files
    bad = tmp_path / "adj.csv"
    pd.DataFrame([{"region_a": "FR10", "region_b": "XXXX"}]).to_csv(bad, index=False)
    with pytest.raises(ValueError, match="XXXX"):
        load_panel(deaths, pop, bad, wi)


def test_mask_weeks(panel_files):
    deaths, pop, adj, wi = panel_files
    panel, _ = load_panel(deaths, pop, adj, wi)
    masked = mask_weeks(panel, [(2020, 2), (2020, 3)])
    assert masked.weight_mask.sum() == 8
    assert panel.weight_mask.sum() == 10  # original untouched
    assert np.array_equal(masked.deaths, panel.deaths)

    same = mask_weeks(panel, [])
    assert np.array_equal(same.weight_mask, panel.weight_mask)

    with pytest.raises(ValueError):
        mask_weeks(panel, [(2021, 1)])


def test_all_masked_refuses_baseline_fit(panel_files):
    from mortregime.baseline import fit_baseline

    deaths, pop, adj, wi = panel_files
    panel, graph = load_panel(deaths, pop, adj, wi)
    dead = mask_weeks(panel, panel.weeks.labels())
    with pytest.raises(ValueError, match="no usable observations"):
        fit_baseline(dead, graph, lambdas=np.zeros(6))


def test_save_load_roundtrip(panel_files, tmp_path):
    deaths, pop, adj, wi = panel_files
    panel, _ = load_panel(deaths, pop, adj, wi)
    out = tmp_path / "resaved.csv"
    frame = panel.to_frame()
    frame[["region", "age_group", "iso_year", "iso_week", "deaths"]].to_csv(out, index=False)
    panel2, _ = load_panel(out, pop, adj, wi)
    assert np.array_equal(panel.deaths, panel2.deaths)
    assert np.allclose(panel.exposures, panel2.exposures)
    assert panel.regions == panel2.regions
    assert panel.age_groups == panel2.age_groups


def test_panel_arrays_immutable(panel_files):
    deaths, pop, adj, wi = panel_files
    panel, graph = load_panel(deaths, pop, adj, wi)
    with pytest.raises(ValueError):
        panel.deaths[0, 0, 0] = 5
    with pytest.raises(ValueError):
        graph.W[0, 1] = 0


def test_region_graph_validation():
    with pytest.raises(ValueError, match="symmetric"):
        RegionGraph(("a", "b"), np.array([[0, 1], [0, 0]], dtype=np.int8))
    with pytest.raises(ValueError, match="diagonal"):
        RegionGraph(("a",), np.array([[1]], dtype=np.int8))
    lonely = RegionGraph(("a", "b"), np.zeros((2, 2), dtype=np.int8))
    assert not lonely.connected
