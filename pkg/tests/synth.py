"""Synthetic worlds for tests: graphs, panels, planted regime dynamics."""

from __future__ import annotations

import numpy as np

from mortregime.features import FeatureFrame
from mortregime.panel import MortalityPanel, RegionGraph, WeekIndex, build_week_index
from mortregime.regime import CovariateSet, RegimeParams, RegimeSpec
from mortregime.uncertainty import simulate_panel

SIX_AGES = ("65-69", "70-74", "75-79", "80-84", "85-89", "90+")
SIX_SHARING = {"65-69": "65-74", "70-74": "65-74", "75-79": "75-84",
               "80-84": "75-84", "85-89": "85+", "90+": "85+"}


def path_graph(R: int) -> RegionGraph:
    W = np.zeros((R, R), dtype=np.int8)
    for r in range(R - 1):
        W[r, r + 1] = W[r + 1, r] = 1
    return RegionGraph(tuple(f"R{i:02d}" for i in range(R)), W)


def week_index(T: int, start=(2015, 1)) -> WeekIndex:
    full = build_week_index(start, (start[0] + T // 40 + 2, 20))
    return WeekIndex(full.iso_years[:T].copy(), full.iso_weeks[:T].copy())


def toy_spec(n_groups: int = 1, ages: tuple[str, ...] = ("65+",)) -> RegimeSpec:
    """Minimal planted spec: one heat and one flu covariate everywhere."""
    if n_groups == 1:
        sharing = {a: "all" for a in ages}
    else:
        sharing = SIX_SHARING
    return RegimeSpec(
        state1=("heat",), state2=("flu",),
        trans={"01": ("heat",), "02": ("flu",), "11": ("heat",), "22": ("flu",)},
        age_sharing=sharing)


def pulse_covariates(R: int, T: int, rng: np.random.Generator,
                     period: int = 52) -> tuple[np.ndarray, np.ndarray]:
    """Episodic summer heat and winter flu pulses, zero outside episodes.

    Each simulated year gets one multi-week heat episode and one flu episode
    per region, with intensities bounded away from zero so shock weeks stay
    emission-identifiable.
    """
    # Background anomaly noise keeps shock states emission-identifiable
    # everywhere (a shock state sitting on exactly-zero covariates would be
    # indistinguishable from baseline); the first weeks stay neutral so the
    # initial-state distribution is cleanly estimable.
    heat = rng.normal(0.0, 0.3, (R, T))
    flu = rng.normal(0.0, 0.3, (R, T))
    n_years = T // period + 1
    for r in range(R):
        for y in range(n_years):
            start = y * period + rng.integers(24, 31)
            for t in range(start, min(start + rng.integers(2, 5), T)):
                heat[r, t] = rng.uniform(1.2, 2.5)
            start = y * period + rng.integers(47, 52)
            for t in range(start, min(start + rng.integers(3, 6), T)):
                flu[r, t] = rng.uniform(1.2, 2.2)
    heat[:, :2] = 0.0
    flu[:, :2] = 0.0
    return heat, flu


def toy_frame(regions, weeks: WeekIndex, heat: np.ndarray, flu: np.ndarray) -> FeatureFrame:
    return FeatureFrame(tuple(regions), weeks, {"heat": heat, "flu": flu})


def planted_params(n_groups: int) -> RegimeParams:
    """Shock amplification up to ~3x at the strongest pulses; shocks enter on
    high pulses and exit within about a week of an episode ending."""
    base1 = np.linspace(0.30, 0.50, n_groups)[:, None]
    base2 = np.linspace(0.35, 0.55, n_groups)[:, None]
    return RegimeParams(
        alpha1=base1, alpha2=base2,
        beta={"01": np.array([-3.5, 2.0]), "02": np.array([-3.5, 2.2]),
              "11": np.array([-1.5, 2.5]), "22": np.array([-1.5, 2.5])},
        rho=np.array([0.98, 0.01, 0.01]))


def planted_world(R: int = 4, T: int = 300, ages=SIX_AGES, seed: int = 0,
                  tau: float = 10.0, spatial: bool = False) -> dict:
    """Panel simulated from known regime dynamics over a path graph.

    Baseline means are a fixed seasonal curve per age group (treated as known
    by the regime layer); deaths come from the planted parameters.
    """
    rng = np.random.default_rng(seed)
    graph = path_graph(R)
    weeks = week_index(T)
    X = len(ages)
    n_groups = 3 if ages == SIX_AGES else 1
    spec = toy_spec(n_groups, ages)
    params = planted_params(n_groups)

    w = weeks.iso_weeks.astype(float)
    season = 1.0 + 0.25 * np.cos(2.0 * np.pi * w / 52.18)
    level = np.linspace(20.0, 70.0, X)
    b_hat = np.empty((R, X, T))
    for r in range(R):
        for x in range(X):
            b_hat[r, x] = level[x] * season * (1.0 + 0.05 * r)

    heat, flu = pulse_covariates(R, T, rng)
    frame = toy_frame(graph.regions, weeks, heat, flu)
    covs = CovariateSet.build(frame, spec, tuple(ages))

    if spatial:
        from mortregime.regime import icar_sample
        u = icar_sample(tau, graph, rng)
    else:
        u = np.zeros(R)
    deaths, states = simulate_panel(params, u, b_hat, covs, rng)
    exposures = np.full((R, X, T), 1000.0)
    panel = MortalityPanel(graph.regions, tuple(ages), weeks, deaths, exposures)
    return {"panel": panel, "graph": graph, "weeks": weeks, "spec": spec,
            "params": params, "covs": covs, "b_hat": b_hat, "u": u,
            "states": states, "frame": frame, "tau": tau}


def random_instance(rng: np.random.Generator, R: int = 2, T: int = 4, X: int = 2):
    """Small random instance for path-enumeration checks."""
    ages = tuple(f"a{i}" for i in range(X))
    sharing = {a: "all" for a in ages}
    spec = RegimeSpec(state1=("z1",), state2=("z2",),
                      trans={"01": ("z1",), "02": ("z2",), "11": ("z1",), "22": ("z2",)},
                      age_sharing=sharing)
    weeks = week_index(T)
    graph = path_graph(R)
    z1 = rng.normal(0.0, 1.0, (R, T))
    z2 = rng.normal(0.0, 1.0, (R, T))
    frame = FeatureFrame(graph.regions, weeks, {"z1": z1, "z2": z2})
    covs = CovariateSet.build(frame, spec, ages)
    params = RegimeParams(
        alpha1=rng.normal(0.0, 0.3, (1, 1)), alpha2=rng.normal(0.0, 0.3, (1, 1)),
        beta={label: rng.normal(0.0, 1.0, 2) for label in ("01", "02", "11", "22")},
        rho=rng.dirichlet(np.ones(3)))
    b_hat = rng.uniform(5.0, 30.0, (R, X, T))
    u = rng.normal(0.0, 0.5, R)
    u -= u.mean()
    deaths = rng.poisson(b_hat * rng.uniform(0.8, 1.6, b_hat.shape))
    return {"spec": spec, "covs": covs, "params": params, "b_hat": b_hat,
            "deaths": deaths, "u": u, "graph": graph, "weeks": weeks, "ages": ages}
