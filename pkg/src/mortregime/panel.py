"""Weekly mortality panel: ISO-week calendar, region adjacency graph, exposures.

All containers are immutable after construction (arrays are set read-only),
so they can be shared freely across parallel workers.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

# Average number of ISO weeks per year, used to spread annual populations
# over weekly exposure cells.
WEEKS_PER_YEAR = 52.18


def _monday(iso_year: int, iso_week: int) -> dt.date:
    """Monday of the given ISO week; raises ValueError for invalid weeks."""
    return dt.date.fromisocalendar(iso_year, iso_week, 1)


def weeks_in_iso_year(iso_year: int) -> int:
    """Number of ISO weeks (52 or 53) in `iso_year`.

    December 28 always falls in the last ISO week of its year, which follows
    from week 1 starting on the Monday of the week containing the first
    Thursday.
    """
    return dt.date(iso_year, 12, 28).isocalendar()[1]


@dataclass(frozen=True)
class WeekIndex:
    """Bijection between week ordinals t = 1..T and (iso_year, iso_week) labels."""

    iso_years: np.ndarray
    iso_weeks: np.ndarray

    def __post_init__(self):
        self.iso_years.setflags(write=False)
        self.iso_weeks.setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.iso_years)

    def year_of(self, t: int) -> int:
        """Calendar (ISO) year y(t) of week ordinal t (1-based)."""
        return int(self.iso_years[t - 1])

    def week_of(self, t: int) -> int:
        """ISO week number w(t) of week ordinal t (1-based)."""
        return int(self.iso_weeks[t - 1])

    def index_of(self, iso_year: int, iso_week: int) -> int:
        """Week ordinal t for the label; raises if outside the window."""
        hit = np.flatnonzero((self.iso_years == iso_year) & (self.iso_weeks == iso_week))
        if hit.size == 0:
            raise ValueError(f"week {iso_year}-W{iso_week:02d} is outside the index window")
        return int(hit[0]) + 1

    def monday_of(self, t: int) -> dt.date:
        return _monday(self.year_of(t), self.week_of(t))

    def labels(self) -> list[tuple[int, int]]:
        return list(zip(self.iso_years.tolist(), self.iso_weeks.tolist()))

    def slice(self, t_start: int, t_end: int) -> "WeekIndex":
        """Sub-index covering ordinals t_start..t_end (1-based, inclusive)."""
        return WeekIndex(self.iso_years[t_start - 1:t_end].copy(),
                         self.iso_weeks[t_start - 1:t_end].copy())


def build_week_index(start: tuple[int, int], end: tuple[int, int]) -> WeekIndex:
    """Consecutive ISO weeks from `start` to `end` inclusive, t = 1 at start."""
    d0 = _monday(*start)
    d1 = _monday(*end)
    if d1 < d0:
        raise ValueError(f"start week {start} is after end week {end}")
    n = (d1 - d0).days // 7 + 1
    years = np.empty(n, dtype=np.int64)
    weeks = np.empty(n, dtype=np.int64)
    for i in range(n):
        iso = (d0 + dt.timedelta(weeks=i)).isocalendar()
        years[i] = iso[0]
        weeks[i] = iso[1]
    return WeekIndex(years, weeks)


@dataclass(frozen=True)
class RegionGraph:
    """Undirected region adjacency: W symmetric 0/1, D diagonal neighbor counts."""

    regions: tuple[str, ...]
    W: np.ndarray

    def __post_init__(self):
        R = len(self.regions)
        if self.W.shape != (R, R):
            raise ValueError("adjacency matrix shape does not match region count")
        if not np.array_equal(self.W, self.W.T):
            raise ValueError("adjacency matrix must be symmetric")
        if np.any(np.diag(self.W) != 0):
            raise ValueError("adjacency matrix must have a zero diagonal")
        self.W.setflags(write=False)

    @property
    def R(self) -> int:
        return len(self.regions)

    @property
    def degrees(self) -> np.ndarray:
        return self.W.sum(axis=1).astype(float)

    @property
    def laplacian(self) -> np.ndarray:
        """D - W, the combinatorial graph Laplacian."""
        return np.diag(self.degrees) - self.W.astype(float)

    @property
    def connected(self) -> bool:
        if self.R == 1:
            return True
        seen = {0}
        stack = [0]
        while stack:
            r = stack.pop()
            for s in np.flatnonzero(self.W[r]):
                if int(s) not in seen:
                    seen.add(int(s))
                    stack.append(int(s))
        return len(seen) == self.R


@dataclass(frozen=True)
class MortalityPanel:
    """Complete (region, age group, week) grid of deaths and exposures.

    deaths    : int array (R, X, T), nonnegative
    exposures : float array (R, X, T), person-weeks, positive
    weight_mask : per-week 0/1 flags; 0 excludes a week from baseline fitting
    """

    regions: tuple[str, ...]
    age_groups: tuple[str, ...]
    weeks: WeekIndex
    deaths: np.ndarray
    exposures: np.ndarray
    weight_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (len(self.regions), len(self.age_groups), self.weeks.T)
        if self.deaths.shape != shape or self.exposures.shape != shape:
            raise ValueError(f"panel arrays must have shape {shape}")
        if np.any(self.deaths < 0):
            raise ValueError("negative death counts in panel")
        if not np.all(np.isfinite(self.exposures)) or np.any(self.exposures <= 0):
            bad = np.argwhere(~(self.exposures > 0))
            r, x, t = bad[0]
            raise ValueError(
                f"non-positive exposure at (region={self.regions[r]}, "
                f"age={self.age_groups[x]}, t={t + 1}); zero-population cells "
                "must be removed or masked before model fitting"
            )
        if self.weight_mask is None:
            object.__setattr__(self, "weight_mask", np.ones(self.weeks.T, dtype=np.int8))
        for arr in (self.deaths, self.exposures, self.weight_mask):
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.deaths.shape

    def to_frame(self) -> pd.DataFrame:
        """Long-format view: one row per (region, age_group, week) cell."""
        R, X, T = self.shape
        ridx, xidx, tidx = np.meshgrid(np.arange(R), np.arange(X), np.arange(T), indexing="ij")
        return pd.DataFrame({
            "region": np.asarray(self.regions)[ridx.ravel()],
            "age_group": np.asarray(self.age_groups)[xidx.ravel()],
            "iso_year": self.weeks.iso_years[tidx.ravel()],
            "iso_week": self.weeks.iso_weeks[tidx.ravel()],
            "deaths": self.deaths.ravel(),
            "exposure": self.exposures.ravel(),
            "weight": self.weight_mask[tidx.ravel()],
        })

    def save(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def build_exposures(population: pd.DataFrame,
                    weeks: WeekIndex,
                    regions: tuple[str, ...],
                    age_groups: tuple[str, ...]) -> np.ndarray:
    """Weekly exposures E = (P_y + P_{y+1}) / (2 * 52.18) in person-weeks.

    `population` has columns region, age_group, year, population with counts
    on January 1 of `year`. The exposure is constant across the weeks of a
    calendar year. Every week needs populations for both y(t) and y(t)+1.
    """
    _require_columns(population, ("region", "age_group", "year", "population"), "population")
    pop = {}
    for row in population.itertuples(index=False):
        key = (row.region, row.age_group, int(row.year))
        if key in pop:
            raise ValueError(f"duplicate population row for {key}")
        pop[key] = float(row.population)

    years = sorted({weeks.year_of(t) for t in range(1, weeks.T + 1)})
    E = np.empty((len(regions), len(age_groups), weeks.T))
    for i, region in enumerate(regions):
        for j, age in enumerate(age_groups):
            per_year = {}
            for y in years:
                for yy in (y, y + 1):
                    if (region, age, yy) not in pop:
                        raise ValueError(
                            f"missing population for (region={region}, age={age}, year={yy})"
                        )
                per_year[y] = (pop[(region, age, y)] + pop[(region, age, y + 1)]) / (2.0 * WEEKS_PER_YEAR)
            E[i, j, :] = [per_year[weeks.year_of(t)] for t in range(1, weeks.T + 1)]
    return E


def _require_columns(df: pd.DataFrame, cols: tuple[str, ...], name: str) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise ValueError(f"{name} file is missing columns {missing}; expected header {list(cols)}")


def load_adjacency(path, regions: tuple[str, ...]) -> RegionGraph:
    """Read undirected edges `region_a,region_b`; duplicate edges are tolerated."""
    edges = pd.read_csv(path)
    _require_columns(edges, ("region_a", "region_b"), "adjacency")
    pos = {r: i for i, r in enumerate(regions)}
    W = np.zeros((len(regions), len(regions)), dtype=np.int8)
    for row in edges.itertuples(index=False):
        for r in (row.region_a, row.region_b):
            if r not in pos:
                raise ValueError(f"adjacency references unknown region {r!r}")
        if row.region_a == row.region_b:
            raise ValueError(f"self-edge on region {row.region_a!r} in adjacency file")
        a, b = pos[row.region_a], pos[row.region_b]
        W[a, b] = 1
        W[b, a] = 1
    return RegionGraph(regions, W)


def load_panel(deaths_path, population_path, adjacency_path,
               weeks: WeekIndex) -> tuple[MortalityPanel, RegionGraph]:
    """Load and validate the three input files into a complete panel.

    Regions are ordered lexicographically; all downstream matrices index
    regions in this fixed order.
    """
    deaths = pd.read_csv(deaths_path)
    _require_columns(deaths, ("region", "age_group", "iso_year", "iso_week", "deaths"), "deaths")
    population = pd.read_csv(population_path)

    regions = tuple(sorted(deaths["region"].unique()))
    age_groups = tuple(sorted(deaths["age_group"].unique()))
    pop_regions = set(population["region"].unique()) if "region" in population.columns else set()
    if set(regions) - pop_regions:
        raise ValueError(f"regions missing from population file: {sorted(set(regions) - pop_regions)}")

    R, X, T = len(regions), len(age_groups), weeks.T
    rpos = {r: i for i, r in enumerate(regions)}
    xpos = {x: i for i, x in enumerate(age_groups)}

    d = np.full((R, X, T), -1, dtype=np.int64)
    for k, row in enumerate(deaths.itertuples(index=False)):
        if row.deaths < 0:
            raise ValueError(f"deaths row {k + 2}: negative count {row.deaths}")
        try:
            t = weeks.index_of(int(row.iso_year), int(row.iso_week))
        except ValueError as exc:
            raise ValueError(f"deaths row {k + 2}: {exc}") from exc
        i, j = rpos[row.region], xpos[row.age_group]
        if d[i, j, t - 1] >= 0:
            raise ValueError(
                f"deaths row {k + 2}: duplicate cell ({row.region}, {row.age_group}, "
                f"{row.iso_year}-W{int(row.iso_week):02d})"
            )
        d[i, j, t - 1] = int(row.deaths)
    if np.any(d < 0):
        i, j, t = np.argwhere(d < 0)[0]
        raise ValueError(
            f"incomplete panel: no deaths row for ({regions[i]}, {age_groups[j]}, "
            f"{weeks.year_of(t + 1)}-W{weeks.week_of(t + 1):02d})"
        )

    E = build_exposures(population, weeks, regions, age_groups)
    if np.any(E <= 0):
        i, j, t = np.argwhere(E <= 0)[0]
        raise ValueError(
            f"invalid exposure (zero population) for ({regions[i]}, {age_groups[j]}, "
            f"year {weeks.year_of(t + 1)})"
        )
    graph = load_adjacency(adjacency_path, regions)
    panel = MortalityPanel(regions, age_groups, weeks, d, E)
    return panel, graph


def mask_weeks(panel: MortalityPanel, weeks_to_mask: list[tuple[int, int]]) -> MortalityPanel:
    """Zero the fit weight of the listed (iso_year, iso_week) labels."""
    mask = panel.weight_mask.copy()
    for label in weeks_to_mask:
        t = panel.weeks.index_of(*label)
        mask[t - 1] = 0
    return replace(panel, weight_mask=mask)
