"""Covariate construction: extreme-temperature indices, anomalies, lags, hinges.

Builds the weekly per-region covariate frame used by the regime model:
HI/CI (hot/cold week indices), TA (temperature anomalies), IA (influenza
anomalies), HA (hospital admissions), plus derived lag averages, 75%-quantile
hinge transforms, and column standardization. All functions are deterministic
and pure; calibration artifacts (thresholds, climatology, seasonal norms,
hinge quantiles, scalers) are recorded so scenario inputs can be transformed
with frozen parameters.
"""

from __future__ import annotations

import datetime as dt
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .panel import WeekIndex

# Naming convention for derived columns, e.g. TA_lag1, IA_avg01, IA_avg01_hinge75.
LAG_SUFFIX = "_lag{lag}"
AVG01_SUFFIX = "_avg01"
AVG23_SUFFIX = "_avg23"
HINGE_SUFFIX = "_hinge75"


@dataclass(frozen=True)
class DailyRegionalSeries:
    """Contiguous daily values (e.g. population-weighted mean temperature) per region."""

    regions: tuple[str, ...]
    start: dt.date
    values: np.ndarray  # (R, n_days)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.regions):
            raise ValueError("values must be a (regions, days) array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("daily series contains missing values")
        self.values.setflags(write=False)

    @property
    def n_days(self) -> int:
        return self.values.shape[1]

    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=i) for i in range(self.n_days)]


def population_weighted_series(grid: pd.DataFrame, weights: pd.DataFrame) -> DailyRegionalSeries:
    """Aggregate gridded daily values into population-weighted region series.

    grid    : columns cell_id, region, date, temperature (one row per cell-day)
    weights : columns cell_id, population (cell-to-region mapping from `grid`)
    """
    for col in ("cell_id", "region", "date", "temperature"):
        if col not in grid.columns:
            raise ValueError(f"grid file is missing column {col!r}")
    for col in ("cell_id", "population"):
        if col not in weights.columns:
            raise ValueError(f"population-grid file is missing column {col!r}")

    cell_region = grid[["cell_id", "region"]].drop_duplicates()
    if cell_region["cell_id"].duplicated().any():
        dup = cell_region[cell_region["cell_id"].duplicated()]["cell_id"].iloc[0]
        raise ValueError(f"cell {dup!r} maps to more than one region")
    merged = grid.merge(weights[["cell_id", "population"]], on="cell_id", how="left")
    if merged["population"].isna().any():
        missing = merged[merged["population"].isna()]["cell_id"].iloc[0]
        raise ValueError(f"no population weight for cell {missing!r}")

    merged["wtemp"] = merged["temperature"] * merged["population"]
    agg = merged.groupby(["region", "date"], sort=True).agg(
        wtemp=("wtemp", "sum"), wsum=("population", "sum"))
    if np.any(agg["wsum"].to_numpy() <= 0):
        region = agg[agg["wsum"] <= 0].index[0][0]
        raise ValueError(f"region {region!r} has zero total population weight")
    agg["value"] = agg["wtemp"] / agg["wsum"]

    wide = agg["value"].unstack("date")
    wide.columns = pd.to_datetime(wide.columns)
    wide = wide.sort_index(axis=1)
    dates = wide.columns
    expected = pd.date_range(dates[0], dates[-1], freq="D")
    if len(dates) != len(expected) or (dates != expected).any():
        raise ValueError("daily grid values are not contiguous over the date range")
    return DailyRegionalSeries(tuple(wide.index), dates[0].date(), wide.to_numpy(float))


def read_regional_daily(frame: pd.DataFrame) -> DailyRegionalSeries:
    """Pre-aggregated daily series with columns region, date, temperature."""
    for col in ("region", "date", "temperature"):
        if col not in frame.columns:
            raise ValueError(f"regional daily file is missing column {col!r}")
    wide = frame.pivot_table(index="region", columns="date", values="temperature")
    wide.columns = pd.to_datetime(wide.columns)
    wide = wide.sort_index(axis=0).sort_index(axis=1)
    if wide.isna().any().any():
        raise ValueError("regional daily series has missing (region, date) cells")
    dates = wide.columns
    expected = pd.date_range(dates[0], dates[-1], freq="D")
    if len(dates) != len(expected) or (dates != expected).any():
        raise ValueError("regional daily series is not contiguous over the date range")
    return DailyRegionalSeries(tuple(wide.index), dates[0].date(), wide.to_numpy(float))


def _week_day_view(series: DailyRegionalSeries, weeks: WeekIndex) -> np.ndarray:
    """(R, T, 7) view of the daily values aligned to whole ISO weeks."""
    first_monday = weeks.monday_of(1)
    offset = (first_monday - series.start).days
    needed = weeks.T * 7
    if offset < 0 or offset + needed > series.n_days:
        raise ValueError(
            "daily series does not cover the week window with whole ISO weeks "
            f"(needs {first_monday} .. {first_monday + dt.timedelta(days=needed - 1)})"
        )
    block = series.values[:, offset:offset + needed]
    return block.reshape(series.values.shape[0], weeks.T, 7)


def weekly_mean(series: DailyRegionalSeries, weeks: WeekIndex) -> np.ndarray:
    """Weekly averages of the daily series over whole ISO weeks, (R, T)."""
    return _week_day_view(series, weeks).mean(axis=2)


def temperature_thresholds(series: DailyRegionalSeries, hi_q: float = 0.95,
                           lo_q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Per-region extreme-temperature thresholds (linear-interpolation quantiles)."""
    hi = np.quantile(series.values, hi_q, axis=1, method="linear")
    lo = np.quantile(series.values, lo_q, axis=1, method="linear")
    return hi, lo


def threshold_indices(series: DailyRegionalSeries, weeks: WeekIndex,
                      hi_q: float = 0.95, lo_q: float = 0.05,
                      thresholds: tuple[np.ndarray, np.ndarray] | None = None,
                      ) -> tuple[np.ndarray, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Hot/cold week indices: weekly means of strict threshold-exceedance indicators.

    Returns (HI, CI, (hi_thresholds, lo_thresholds)); pass `thresholds` to reuse
    calibrated values on scenario inputs.
    """
    if thresholds is None:
        thresholds = temperature_thresholds(series, hi_q, lo_q)
    hi_thr, lo_thr = thresholds
    days = _week_day_view(series, weeks)
    hot = (days > hi_thr[:, None, None]).mean(axis=2)
    cold = (days < lo_thr[:, None, None]).mean(axis=2)
    return hot, cold, thresholds


def climatology(series: DailyRegionalSeries, window: int = 31) -> np.ndarray:
    """Per-region baseline temperature for each day-of-year slot, (R, 366).

    Mean across years per day-of-year, smoothed with a centered circular
    moving average over the 365-day cycle; slot 366 borrows slot 365.
    """
    doy = np.array([min(d.timetuple().tm_yday, 365) for d in series.dates()])
    R = series.values.shape[0]
    sums = np.zeros((R, 365))
    counts = np.zeros(365)
    np.add.at(sums.T, doy - 1, series.values.T)
    np.add.at(counts, doy - 1, 1.0)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0]) + 1
        raise ValueError(f"no observations for day-of-year {missing}; need full-year coverage")
    base = sums / counts
    half = window // 2
    idx = (np.arange(365)[:, None] + np.arange(-half, half + 1)[None, :]) % 365
    smooth = base[:, idx].mean(axis=2)
    out = np.empty((R, 366))
    out[:, :365] = smooth
    out[:, 365] = smooth[:, 364]
    return out


def temperature_anomalies(series: DailyRegionalSeries, baseline: np.ndarray,
                          weeks: WeekIndex) -> np.ndarray:
    """Weekly means of (observed - climatological baseline) per day, (R, T)."""
    if baseline.shape != (series.values.shape[0], 366):
        raise ValueError("baseline must be (regions, 366)")
    doy = np.array([d.timetuple().tm_yday for d in series.dates()])
    dev = series.values - baseline[:, doy - 1]
    dev_series = DailyRegionalSeries(series.regions, series.start, dev)
    return weekly_mean(dev_series, weeks)


def seasonal_norm(values: np.ndarray, weeks: WeekIndex) -> np.ndarray:
    """Cross-year mean per ISO-week slot, (R, 53); NaN for slots never observed."""
    R, T = values.shape
    out = np.full((R, 53), np.nan)
    w = weeks.iso_weeks
    for slot in range(1, 54):
        cols = np.flatnonzero(w == slot)
        if cols.size:
            out[:, slot - 1] = values[:, cols].mean(axis=1)
    return out


def seasonal_anomaly(values: np.ndarray, weeks: WeekIndex, exclude_self: bool = False,
                     norm: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Deviations of a weekly series from its ISO-week seasonal norm.

    With exclude_self the norm for each cell is the mean over the *other*
    years sharing the ISO-week slot (leave-one-year-out). Pass a frozen
    `norm` to apply calibration norms to scenario values.
    """
    R, T = values.shape
    if norm is not None:
        w = weeks.iso_weeks
        ref = norm[:, w - 1]
        if np.any(~np.isfinite(ref)):
            slot = int(w[np.flatnonzero(~np.isfinite(ref).all(axis=0))[0]])
            raise ValueError(f"frozen seasonal norm has no value for ISO week {slot}")
        return values - ref, norm
    full = seasonal_norm(values, weeks)
    w = weeks.iso_weeks
    counts = np.array([(w == slot).sum() for slot in range(1, 54)])
    anom = np.empty_like(values)
    for slot in range(1, 54):
        cols = np.flatnonzero(w == slot)
        if cols.size == 0:
            continue
        n = counts[slot - 1]
        if exclude_self:
            if n < 2:
                raise ValueError(
                    f"ISO week {slot} has a single observed year; cannot exclude self"
                )
            total = values[:, cols].sum(axis=1, keepdims=True)
            anom[:, cols] = values[:, cols] - (total - values[:, cols]) / (n - 1)
        else:
            anom[:, cols] = values[:, cols] - full[:, slot - 1][:, None]
    return anom, full


def lag_average(values: np.ndarray, lags: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Mean of values at week offsets `lags`; returns (out, available mask).

    Cells whose history reaches before the window start are NaN with a False
    mask entry.
    """
    lags = tuple(sorted(set(int(l) for l in lags)))
    if any(l < 0 for l in lags):
        raise ValueError("lags must be nonnegative")
    R, T = values.shape
    out = np.zeros((R, T))
    for lag in lags:
        shifted = np.full((R, T), np.nan)
        shifted[:, lag:] = values[:, :T - lag]
        out = out + shifted
    out = out / len(lags)
    avail = np.isfinite(out)
    return out, avail


def hinge_q75(values: np.ndarray, calib: np.ndarray | None = None,
              q75: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exceedance over the per-region 75% quantile: max(value - q75, 0).

    The quantile uses linear interpolation between order statistics and is
    computed over the calibration columns (`calib` boolean mask over weeks,
    default all); pass frozen `q75` to transform scenario values.
    """
    if q75 is None:
        cols = values if calib is None else values[:, calib]
        finite = np.isfinite(cols)
        if not finite.all():
            q75 = np.array([np.quantile(row[np.isfinite(row)], 0.75, method="linear")
                            for row in cols])
        else:
            q75 = np.quantile(cols, 0.75, axis=1, method="linear")
    with np.errstate(invalid="ignore"):
        out = np.maximum(values - q75[:, None], 0.0)
    out[~np.isfinite(values)] = np.nan
    return out, q75


@dataclass
class FeatureFrame:
    """Named per-(region, week) covariate columns with standardization metadata.

    columns : dict name -> (R, T) float array
    avail   : dict name -> (R, T) bool array; absent means fully available
    scalers : dict name -> (mean, scale) recorded when a column is standardized
    """

    regions: tuple[str, ...]
    weeks: WeekIndex
    columns: dict[str, np.ndarray]
    avail: dict[str, np.ndarray] = field(default_factory=dict)
    scalers: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        R, T = len(self.regions), self.weeks.T
        for name, arr in self.columns.items():
            if arr.shape != (R, T):
                raise ValueError(f"column {name!r} must have shape {(R, T)}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.columns)

    def available(self, name: str) -> np.ndarray:
        if name in self.avail:
            return self.avail[name]
        return np.isfinite(self.columns[name])

    def matrix(self, names: tuple[str, ...], fill_unavailable: float | None = None) -> np.ndarray:
        """(R, T, k) covariate stack; unavailable cells raise unless filled."""
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise ValueError(f"feature frame has no columns {missing}; available: {sorted(self.columns)}")
        mats = []
        for n in names:
            col = self.columns[n]
            ok = self.available(n)
            if not ok.all():
                if fill_unavailable is None:
                    t_bad = int(np.argwhere(~ok)[0][1]) + 1
                    raise ValueError(
                        f"column {n!r} unavailable at week t={t_bad}; "
                        "fill leading lag cells or trim the window"
                    )
                col = np.where(ok, col, fill_unavailable)
            mats.append(col)
        return np.stack(mats, axis=2)

    def standardize(self, names: tuple[str, ...]) -> "FeatureFrame":
        """Rescale columns to zero mean / unit scale over available cells."""
        cols = dict(self.columns)
        scalers = dict(self.scalers)
        for n in names:
            if n in scalers:
                raise ValueError(f"column {n!r} is already standardized")
            arr = self.columns[n]
            ok = self.available(n)
            mean = float(arr[ok].mean())
            scale = float(arr[ok].std())
            if scale == 0.0:
                scale = 1.0
            out = np.where(ok, (arr - mean) / scale, np.nan)
            cols[n] = out
            scalers[n] = (mean, scale)
        return FeatureFrame(self.regions, self.weeks, cols, dict(self.avail), scalers)

    def apply_scalers(self, scalers: dict[str, tuple[float, float]]) -> "FeatureFrame":
        """Apply frozen calibration scalers (for scenario frames)."""
        cols = dict(self.columns)
        for n, (mean, scale) in scalers.items():
            if n not in cols:
                continue
            ok = self.available(n)
            cols[n] = np.where(ok, (cols[n] - mean) / scale, np.nan)
        return FeatureFrame(self.regions, self.weeks, cols, dict(self.avail), dict(scalers))

    def destandardize(self, name: str) -> np.ndarray:
        mean, scale = self.scalers[name]
        return self.columns[name] * scale + mean

    def to_frame(self) -> pd.DataFrame:
        R, T = len(self.regions), self.weeks.T
        ridx, tidx = np.meshgrid(np.arange(R), np.arange(T), indexing="ij")
        data = {
            "region": np.asarray(self.regions)[ridx.ravel()],
            "iso_year": self.weeks.iso_years[tidx.ravel()],
            "iso_week": self.weeks.iso_weeks[tidx.ravel()],
        }
        for n, arr in self.columns.items():
            masked = np.where(self.available(n), arr, np.nan)
            data[n] = masked.ravel()
        return pd.DataFrame(data)

    def save(self, path, scaler_path=None) -> None:
        self.to_frame().to_csv(path, index=False)
        if scaler_path is not None:
            with open(scaler_path, "w") as fh:
                json.dump({k: list(v) for k, v in self.scalers.items()}, fh, indent=1)

    @classmethod
    def load(cls, path, scaler_path=None) -> "FeatureFrame":
        df = pd.read_csv(path)
        regions = tuple(sorted(df["region"].unique()))
        labels = df[["iso_year", "iso_week"]].drop_duplicates().sort_values(["iso_year", "iso_week"])
        weeks = WeekIndex(labels["iso_year"].to_numpy(np.int64), labels["iso_week"].to_numpy(np.int64))
        names = [c for c in df.columns if c not in ("region", "iso_year", "iso_week")]
        R, T = len(regions), weeks.T
        rpos = {r: i for i, r in enumerate(regions)}
        tpos = {lab: i for i, lab in enumerate(zip(weeks.iso_years.tolist(), weeks.iso_weeks.tolist()))}
        cols = {n: np.full((R, T), np.nan) for n in names}
        ri = df["region"].map(rpos).to_numpy()
        ti = [tpos[(y, w)] for y, w in zip(df["iso_year"], df["iso_week"])]
        for n in names:
            cols[n][ri, ti] = df[n].to_numpy(float)
        avail = {n: np.isfinite(cols[n]) for n in names if not np.isfinite(cols[n]).all()}
        scalers = {}
        if scaler_path is not None:
            with open(scaler_path) as fh:
                scalers = {k: tuple(v) for k, v in json.load(fh).items()}
        return cls(regions, weeks, cols, avail, scalers)


@dataclass
class FeatureArtifacts:
    """Calibration state needed to rebuild features on scenario inputs."""

    hi_threshold: np.ndarray
    lo_threshold: np.ndarray
    climatology: np.ndarray
    ia_norm: np.ndarray
    hinge_q75: dict[str, np.ndarray]
    scalers: dict[str, tuple[float, float]]

    def save(self, path) -> None:
        payload = {
            "schema_version": 1,
            "hi_threshold": self.hi_threshold.tolist(),
            "lo_threshold": self.lo_threshold.tolist(),
            "climatology": self.climatology.tolist(),
            "ia_norm": self.ia_norm.tolist(),
            "hinge_q75": {k: v.tolist() for k, v in self.hinge_q75.items()},
            "scalers": {k: list(v) for k, v in self.scalers.items()},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "FeatureArtifacts":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            hi_threshold=np.asarray(payload["hi_threshold"], float),
            lo_threshold=np.asarray(payload["lo_threshold"], float),
            climatology=np.asarray(payload["climatology"], float),
            ia_norm=np.asarray(payload["ia_norm"], float),
            hinge_q75={k: np.asarray(v, float) for k, v in payload["hinge_q75"].items()},
            scalers={k: tuple(v) for k, v in payload["scalers"].items()},
        )


# Columns rescaled to zero mean / unit scale before entering the regime model.
# HI and CI are left raw: they are already unit-scale indices in [0, 1].
STANDARDIZED_COLUMNS = (
    "TA", "TA_lag1", "TA_lag2",
    "IA_avg01_hinge75", "IA_avg23_hinge75",
    "HA_avg01_hinge75", "HA_avg23_hinge75",
)


def raw_parents(frame: FeatureFrame, n_weeks: int | None = None) -> dict[str, np.ndarray]:
    """Raw (de-standardized) parent columns, optionally just the last `n_weeks`.

    Used to seed scenario frames so lagged covariates are defined from the
    first horizon week.
    """
    out = {}
    for name in ("HI", "CI", "TA", "IA", "HA"):
        col = frame.destandardize(name) if name in frame.scalers else frame.columns[name]
        out[name] = col if n_weeks is None else col[:, -n_weeks:]
    return out


def build_features(temp: DailyRegionalSeries, ili: np.ndarray, ha: np.ndarray,
                   weeks: WeekIndex, exclude_self: bool = False,
                   artifacts: FeatureArtifacts | None = None,
                   standardize: tuple[str, ...] = STANDARDIZED_COLUMNS,
                   history: dict[str, np.ndarray] | None = None,
                   ) -> tuple[FeatureFrame, FeatureArtifacts]:
    """Assemble the full covariate frame from raw inputs.

    ili : weekly influenza incidences per 100 inhabitants, (R, T)
    ha  : weekly COVID-19 hospital admissions per 1,000 inhabitants, (R, T)

    Pass `artifacts` to apply frozen calibration thresholds/norms/quantiles/
    scalers (scenario mode), and `history` (raw parent columns of preceding
    weeks, see `raw_parents`) to give leading lag cells real values. Without
    history, lag cells with no past are left unavailable and zero-filled with
    a warning when the model matrix is assembled.
    """
    frozen = artifacts is not None
    hi, ci, thresholds = threshold_indices(
        temp, weeks,
        thresholds=(artifacts.hi_threshold, artifacts.lo_threshold) if frozen else None)
    clim = artifacts.climatology if frozen else climatology(temp)
    ta = temperature_anomalies(temp, clim, weeks)
    ia, ia_norm = seasonal_anomaly(ili, weeks, exclude_self=exclude_self,
                                   norm=artifacts.ia_norm if frozen else None)

    parents: dict[str, np.ndarray] = {"HI": hi, "CI": ci, "TA": ta, "IA": ia, "HA": ha}
    n_hist = 0
    if history is not None:
        n_hist = next(iter(history.values())).shape[1]
        missing = [k for k in parents if k not in history]
        if missing:
            raise ValueError(f"history is missing parent columns {missing}")
        parents = {k: np.concatenate([history[k], parents[k]], axis=1) for k in parents}

    cols: dict[str, np.ndarray] = dict(parents)
    avail: dict[str, np.ndarray] = {}

    for parent in ("TA", "HI"):
        for lag in (1, 2):
            name = parent + LAG_SUFFIX.format(lag=lag)
            cols[name], avail[name] = lag_average(cols[parent], (lag,))
    for parent in ("IA", "CI", "HA"):
        for name_suffix, lags in ((AVG01_SUFFIX, (0, 1)), (AVG23_SUFFIX, (2, 3))):
            name = parent + name_suffix
            cols[name], avail[name] = lag_average(cols[parent], lags)

    hinge_qs: dict[str, np.ndarray] = {}
    for parent in ("IA_avg01", "IA_avg23", "HA_avg01", "HA_avg23"):
        name = parent + HINGE_SUFFIX
        frozen_q = artifacts.hinge_q75[parent] if frozen else None
        cols[name], hinge_qs[parent] = hinge_q75(cols[parent], q75=frozen_q)
        avail[name] = avail[parent]

    if n_hist:
        cols = {n: arr[:, n_hist:] for n, arr in cols.items()}
        avail = {n: a[:, n_hist:] for n, a in avail.items()}
    avail = {n: a for n, a in avail.items() if not a.all()}
    frame = FeatureFrame(temp.regions, weeks, cols, avail)
    if frozen:
        frame = frame.apply_scalers(artifacts.scalers)
        out_artifacts = artifacts
    else:
        frame = frame.standardize(tuple(n for n in standardize if n in cols))
        out_artifacts = FeatureArtifacts(
            hi_threshold=thresholds[0], lo_threshold=thresholds[1],
            climatology=clim, ia_norm=ia_norm, hinge_q75=hinge_qs,
            scalers=frame.scalers)
    unavailable = {n for n, a in frame.avail.items() if not a.all()}
    if unavailable:
        warnings.warn(
            f"columns {sorted(unavailable)} lack full lag history at the window "
            "start; affected cells are flagged and zero-filled in model matrices",
            stacklevel=2)
    return frame, out_artifacts
