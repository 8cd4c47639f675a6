"""Batch command-line pipeline: ingest, features, baseline and regime fits,
Fisher information, forecasts, scenario generation, and charts.

Stages read a shared INI project configuration, write delimited or JSON
artifacts into the output directory, and record content hashes in a run
manifest so unchanged stages are skipped on re-runs. Exit codes: 0 success,
2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import baseline as bl
from . import em as em_mod
from . import features as ft
from . import forecast as fc
from . import panel as pn
from . import regime as rg
from . import scenario as sc
from . import uncertainty as un

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

_WEEK_RE = re.compile(r"^(\d{4})-W(\d{1,2})$")


def parse_week(label: str) -> tuple[int, int]:
    m = _WEEK_RE.match(label.strip())
    if not m:
        raise ValueError(f"bad week label {label!r}; expected e.g. 2020-W12")
    return int(m.group(1)), int(m.group(2))


def parse_mask_weeks(text: str) -> list[tuple[int, int]]:
    """Comma list of week labels; a colon denotes an inclusive range."""
    out: list[tuple[int, int]] = []
    for part in (p.strip() for p in text.split(",") if p.strip()):
        if ":" in part:
            a, b = part.split(":")
            idx = pn.build_week_index(parse_week(a), parse_week(b))
            out.extend(idx.labels())
        else:
            out.append(parse_week(part))
    return out


@dataclass
class ProjectConfig:
    """Validated project configuration mirroring the module layout."""

    deaths: Path
    population: Path
    adjacency: Path
    temperature: Path
    ili: Path
    hospitalizations: Path
    output_dir: Path
    window_start: tuple[int, int]
    window_end: tuple[int, int]
    population_grid: Path | None = None
    lambda_grid: tuple[float, ...] = bl.DEFAULT_LAMBDA_GRID
    mask_weeks: list = field(default_factory=list)
    spec_file: Path | None = None
    tau_grid: tuple[float, ...] = em_mod.DEFAULT_TAU_GRID
    epsilon: float = 1e-6
    threads: int = 1
    fim_replicates: int = 2000
    fim_scale: float | None = None
    B: int = 25000
    toggles: str = "param,spatial,state,poisson"
    seed: int = 0
    exclude_self: bool = False
    config_hash: str = ""

    @classmethod
    def from_ini(cls, path) -> "ProjectConfig":
        path = Path(path)
        cfg = configparser.ConfigParser()
        cfg.optionxform = str
        read = cfg.read(path)
        if not read:
            raise FileNotFoundError(f"config file {path} not found")
        base = path.parent

        def p(section, key, default=None, required=False):
            if cfg.has_option(section, key):
                return base / cfg.get(section, key)
            if required:
                raise ValueError(f"config is missing [{section}] {key}")
            return default

        kwargs = dict(
            deaths=p("paths", "deaths", required=True),
            population=p("paths", "population", required=True),
            adjacency=p("paths", "adjacency", required=True),
            temperature=p("paths", "temperature", required=True),
            ili=p("paths", "ili", required=True),
            hospitalizations=p("paths", "hospitalizations", required=True),
            population_grid=p("paths", "population_grid"),
            output_dir=p("paths", "output_dir", default=base / "out"),
            window_start=parse_week(cfg.get("window", "start")),
            window_end=parse_week(cfg.get("window", "end")),
        )
        if cfg.has_option("baseline", "lambda_grid"):
            kwargs["lambda_grid"] = tuple(
                float(v) for v in cfg.get("baseline", "lambda_grid").split(","))
        if cfg.has_option("baseline", "mask_weeks"):
            kwargs["mask_weeks"] = parse_mask_weeks(cfg.get("baseline", "mask_weeks"))
        if cfg.has_option("regime", "spec"):
            kwargs["spec_file"] = base / cfg.get("regime", "spec")
        if cfg.has_option("regime", "tau_grid"):
            kwargs["tau_grid"] = tuple(float(v) for v in cfg.get("regime", "tau_grid").split(","))
        if cfg.has_option("regime", "epsilon"):
            kwargs["epsilon"] = cfg.getfloat("regime", "epsilon")
        if cfg.has_option("regime", "threads"):
            kwargs["threads"] = cfg.getint("regime", "threads")
        if cfg.has_option("uncertainty", "replicates"):
            kwargs["fim_replicates"] = cfg.getint("uncertainty", "replicates")
        if cfg.has_option("uncertainty", "scale"):
            kwargs["fim_scale"] = cfg.getfloat("uncertainty", "scale")
        if cfg.has_option("forecast", "B"):
            kwargs["B"] = cfg.getint("forecast", "B")
        if cfg.has_option("forecast", "toggles"):
            kwargs["toggles"] = cfg.get("forecast", "toggles")
        if cfg.has_option("seeds", "master"):
            kwargs["seed"] = cfg.getint("seeds", "master")
        if cfg.has_option("features", "exclude_self"):
            kwargs["exclude_self"] = cfg.getboolean("features", "exclude_self")
        obj = cls(**kwargs)
        obj.config_hash = hashlib.sha256(path.read_bytes()).hexdigest()
        return obj

    def validate(self) -> None:
        for name in ("deaths", "population", "adjacency", "temperature",
                     "ili", "hospitalizations"):
            f = getattr(self, name)
            if not Path(f).exists():
                raise FileNotFoundError(f"input file for {name!r} not found: {f}")
        if self.spec_file is not None and not self.spec_file.exists():
            raise FileNotFoundError(f"regime spec file not found: {self.spec_file}")
        pn.build_week_index(self.window_start, self.window_end)

    @property
    def weeks(self) -> pn.WeekIndex:
        return pn.build_week_index(self.window_start, self.window_end)

    def artifact(self, name: str) -> Path:
        return Path(self.output_dir) / name


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_spec(cfg: ProjectConfig) -> rg.RegimeSpec:
    if cfg.spec_file is not None:
        return rg.spec_from_config(cfg.spec_file)
    return rg.default_spec()


def _read_weekly(path, weeks: pn.WeekIndex, regions, column, scale=1.0,
                 fill_missing=None) -> np.ndarray:
    """Weekly per-region series from `region,iso_year,iso_week,<column>`."""
    df = pd.read_csv(path)
    for col in ("region", "iso_year", "iso_week", column):
        if col not in df.columns:
            raise ValueError(f"{path}: missing column {col!r}")
    rpos = {r: i for i, r in enumerate(regions)}
    out = np.full((len(regions), weeks.T), np.nan)
    for row in df.itertuples(index=False):
        if row.region not in rpos:
            continue
        try:
            t = weeks.index_of(int(row.iso_year), int(row.iso_week))
        except ValueError:
            continue
        out[rpos[row.region], t - 1] = getattr(row, column) * scale
    if np.any(~np.isfinite(out)):
        if fill_missing is None:
            r, t = np.argwhere(~np.isfinite(out))[0]
            raise ValueError(
                f"{path}: no value for (region={regions[r]}, "
                f"{weeks.year_of(t + 1)}-W{weeks.week_of(t + 1):02d})")
        out = np.where(np.isfinite(out), out, fill_missing)
    return out


def _read_temperature(cfg: ProjectConfig) -> ft.DailyRegionalSeries:
    df = pd.read_csv(cfg.temperature)
    if "cell_id" in df.columns:
        if cfg.population_grid is None:
            raise ValueError("gridded temperature input needs [paths] population_grid")
        weights = pd.read_csv(cfg.population_grid)
        return ft.population_weighted_series(df, weights)
    return ft.read_regional_daily(df)


# ---------------------------------------------------------------------------
# Stages


def stage_ingest(cfg: ProjectConfig) -> dict:
    panel, graph = pn.load_panel(cfg.deaths, cfg.population, cfg.adjacency, cfg.weeks)
    if cfg.mask_weeks:
        panel = pn.mask_weeks(panel, cfg.mask_weeks)
    out = cfg.artifact("panel.csv")
    panel.save(out)
    return {"inputs": [cfg.deaths, cfg.population, cfg.adjacency],
            "outputs": [out]}


def _load_panel(cfg: ProjectConfig):
    panel, graph = pn.load_panel(cfg.deaths, cfg.population, cfg.adjacency, cfg.weeks)
    if cfg.mask_weeks:
        panel = pn.mask_weeks(panel, cfg.mask_weeks)
    return panel, graph


def stage_features(cfg: ProjectConfig) -> dict:
    panel, _ = _load_panel(cfg)
    temp = _read_temperature(cfg)
    ili = _read_weekly(cfg.ili, cfg.weeks, panel.regions, "ili_per_100k", scale=1e-3)
    ha = _read_weekly(cfg.hospitalizations, cfg.weeks, panel.regions,
                      "ha_per_1000", fill_missing=0.0)
    frame, artifacts = ft.build_features(temp, ili, ha, cfg.weeks,
                                         exclude_self=cfg.exclude_self)
    out_csv = cfg.artifact("features.csv")
    out_scalers = cfg.artifact("feature_scalers.json")
    out_art = cfg.artifact("feature_artifacts.json")
    frame.save(out_csv, out_scalers)
    artifacts.save(out_art)
    return {"inputs": [cfg.deaths, cfg.population, cfg.adjacency, cfg.temperature,
                       cfg.ili, cfg.hospitalizations],
            "outputs": [out_csv, out_scalers, out_art]}


def stage_fit_baseline(cfg: ProjectConfig) -> dict:
    panel, graph = _load_panel(cfg)
    fit = bl.fit_baseline(panel, graph, lambda_grid=cfg.lambda_grid)
    out = cfg.artifact("baseline_fit.json")
    fit.save(out)
    _embed_meta(out, cfg)
    return {"inputs": [cfg.deaths, cfg.population, cfg.adjacency], "outputs": [out]}


def _load_calibration(cfg: ProjectConfig):
    panel, graph = _load_panel(cfg)
    fit = bl.BaselineFit.load(cfg.artifact("baseline_fit.json"))
    frame = ft.FeatureFrame.load(cfg.artifact("features.csv"),
                                 cfg.artifact("feature_scalers.json"))
    spec = _load_spec(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        covs = rg.CovariateSet.build(frame, spec, panel.age_groups)
    return panel, graph, fit, frame, spec, covs


def stage_fit_regime(cfg: ProjectConfig) -> dict:
    panel, graph, fit, frame, spec, covs = _load_calibration(cfg)
    init = rg.initial_params(spec)
    profile = em_mod.profile_tau(panel.deaths, fit.fitted_b, covs, graph,
                                 grid=cfg.tau_grid, init=init, epsilon=cfg.epsilon,
                                 threads=cfg.threads)
    best = profile.fits[profile.tau_star]
    out = cfg.artifact("regime_fit.json")
    em_mod.save_regime_fit(out, best, spec, profile.logliks,
                           extra={"config_hash": cfg.config_hash, "seed": cfg.seed})
    return {"inputs": [cfg.artifact("baseline_fit.json"), cfg.artifact("features.csv")],
            "outputs": [out]}


def stage_fim(cfg: ProjectConfig) -> dict:
    panel, graph, fit, frame, spec, covs = _load_calibration(cfg)
    params, u, tau, spec2, _ = em_mod.load_regime_fit(cfg.artifact("regime_fit.json"))
    est = un.spsa_fim(params, u, tau, fit.fitted_b, covs, graph, spec=spec2,
                      M=cfg.fim_replicates, c=cfg.fim_scale, seed=cfg.seed)
    out = cfg.artifact("fim.json")
    est.save(out, seed=cfg.seed, extra={"config_hash": cfg.config_hash})
    return {"inputs": [cfg.artifact("regime_fit.json")], "outputs": [out]}


def stage_forecast(cfg: ProjectConfig, scenario_file=None, B=None, toggles=None,
                   seed=None, emit_charts_dir=None, metric="deaths") -> dict:
    panel, graph, fit, frame, spec, covs = _load_calibration(cfg)
    params, u, tau, spec2, _ = em_mod.load_regime_fit(cfg.artifact("regime_fit.json"))
    fisher = un.FisherEstimate.load(cfg.artifact("fim.json"))
    sigma1, sigma2 = un.coefficient_covariances(fit, fisher)
    togg = fc.UncertaintyToggles.parse(toggles if toggles is not None else cfg.toggles)
    B = B if B is not None else cfg.B
    seed = seed if seed is not None else cfg.seed

    fs = em_mod.forward_filter(panel.deaths, fit.fitted_b, covs, u, params)
    inputs = [cfg.artifact("regime_fit.json"), cfg.artifact("fim.json")]
    if scenario_file is None:
        weeks = panel.weeks
        exposures = panel.exposures
        horizon_covs = covs
        init_state = fc.initial_state_insample(params, graph.R)
        fixed = fc.best_estimate_states(fs)
    else:
        sframe = ft.FeatureFrame.load(scenario_file)
        weeks = sframe.weeks
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            horizon_covs = rg.CovariateSet.build(sframe, spec2, panel.age_groups)
        exposures = _horizon_exposures(cfg, panel, weeks)
        init_state = fc.initial_state_forecast(fs)
        fixed = None
        inputs.append(Path(scenario_file))

    bands = fc.bootstrap_predict(fit, weeks, exposures, horizon_covs, params, u,
                                 tau, graph, togg, B=B, seed=seed, sigma1=sigma1,
                                 sigma2=sigma2, initial_state=init_state,
                                 fixed_path=fixed, metric=metric)
    out = cfg.artifact("bands.csv")
    bands.save(out)
    outputs = [out]
    if emit_charts_dir is not None:
        be = fc.best_estimate_deaths(fc.best_estimate_states(fs), fit.fitted_b,
                                     covs, params)
        observed = panel.deaths if scenario_file is None else None
        bas = fit.fitted_b if scenario_file is None else None
        be_arr = be if scenario_file is None else None
        outputs += emit_charts(bands, emit_charts_dir, observed=observed,
                               baseline=bas, best_estimate=be_arr)
    return {"inputs": inputs, "outputs": outputs}


def _horizon_exposures(cfg: ProjectConfig, panel: pn.MortalityPanel,
                       weeks: pn.WeekIndex) -> np.ndarray:
    """Exposures over a forecast horizon; years beyond the population file
    reuse the last available year (rates are reported, so levels cancel)."""
    population = pd.read_csv(cfg.population)
    years = set(population["year"].astype(int))
    needed = {weeks.year_of(t) for t in range(1, weeks.T + 1)}
    needed |= {y + 1 for y in needed}
    last = max(years)
    rows = []
    for y in sorted(needed - years):
        base = population[population["year"] == last].copy()
        base["year"] = y
        rows.append(base)
    if rows:
        population = pd.concat([population] + rows, ignore_index=True)
    return pn.build_exposures(population, weeks, panel.regions, panel.age_groups)


def stage_simulate(cfg: ProjectConfig, seed=None) -> dict:
    panel, graph, fit, frame, spec, covs = _load_calibration(cfg)
    params, u, tau, _, _ = em_mod.load_regime_fit(cfg.artifact("regime_fit.json"))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    deaths, states = un.simulate_panel(params, u, fit.fitted_b, covs, rng)
    sim = pn.MortalityPanel(panel.regions, panel.age_groups, panel.weeks,
                            deaths, panel.exposures.copy(), panel.weight_mask.copy())
    out = cfg.artifact("simulated_panel.csv")
    sim.save(out)
    out_states = cfg.artifact("simulated_states.csv")
    pd.DataFrame({
        "region": np.repeat(panel.regions, panel.weeks.T),
        "iso_year": np.tile(panel.weeks.iso_years, graph.R),
        "iso_week": np.tile(panel.weeks.iso_weeks, graph.R),
        "state": states.ravel(),
    }).to_csv(out_states, index=False)
    return {"inputs": [cfg.artifact("regime_fit.json")], "outputs": [out, out_states]}


def stage_scenario_sirs(cfg: ProjectConfig, iterations=6000, burn_in=3000,
                        seed=None, horizon_end=None) -> dict:
    panel, _ = _load_panel(cfg)
    weeks = cfg.weeks
    ili = _read_weekly(cfg.ili, weeks, panel.regions, "ili_per_100k", scale=1e-3)
    seed = cfg.seed if seed is None else seed
    end = parse_week(horizon_end) if horizon_end else (weeks.year_of(weeks.T) + 5, 52)
    last = (weeks.year_of(weeks.T), weeks.week_of(weeks.T))
    horizon = _next_week_index(last, end)

    levels = {"moderate": 0.50, "high": 0.80, "severe": 0.95}
    out_rows = []
    for i, region in enumerate(panel.regions):
        series_1000 = ili[i] * 10.0  # per-100 -> per-1,000 for the SIRS scale
        post = sc.sirs_mcmc(series_1000, N=1000.0, week_numbers=weeks.iso_weeks,
                            iterations=iterations, burn_in=burn_in,
                            seed=np.random.default_rng([seed, i]))
        rng = np.random.default_rng([seed, i, 1])
        trajs = sc.sirs_forecast(post, series_1000, weeks.iso_weeks,
                                 horizon.iso_weeks, rng,
                                 levels=tuple(levels.values()))
        for name, lvl in levels.items():
            for t in range(horizon.T):
                out_rows.append({"region": region, "scenario": name,
                                 "iso_year": horizon.year_of(t + 1),
                                 "iso_week": horizon.week_of(t + 1),
                                 "ili_per_100": trajs[lvl][t] / 10.0})
    out = cfg.artifact("sirs_scenarios.csv")
    pd.DataFrame(out_rows).to_csv(out, index=False)
    return {"inputs": [cfg.ili], "outputs": [out]}


def _next_week_index(last: tuple[int, int], end: tuple[int, int]) -> pn.WeekIndex:
    """Week index starting the week after `last` and running through `end`."""
    import datetime as dt

    nxt = pn._monday(*last) + dt.timedelta(weeks=1)
    iso = nxt.isocalendar()
    return pn.build_week_index((iso[0], iso[1]), end)


def stage_assemble_scenarios(cfg: ProjectConfig, rcp26, rcp45, rcp85,
                             ha_assumption=0.0) -> dict:
    panel, _ = _load_panel(cfg)
    artifacts = ft.FeatureArtifacts.load(cfg.artifact("feature_artifacts.json"))
    frame = ft.FeatureFrame.load(cfg.artifact("features.csv"),
                                 cfg.artifact("feature_scalers.json"))
    sirs = pd.read_csv(cfg.artifact("sirs_scenarios.csv"))
    labels = sirs[["iso_year", "iso_week"]].drop_duplicates().sort_values(
        ["iso_year", "iso_week"])
    horizon = pn.build_week_index(
        (int(labels.iloc[0]["iso_year"]), int(labels.iloc[0]["iso_week"])),
        (int(labels.iloc[-1]["iso_year"]), int(labels.iloc[-1]["iso_week"])))
    influenza = {}
    rpos = {r: i for i, r in enumerate(panel.regions)}
    for name in ("moderate", "high", "severe"):
        arr = np.zeros((len(panel.regions), horizon.T))
        sub = sirs[sirs["scenario"] == name]
        for row in sub.itertuples(index=False):
            arr[rpos[row.region], horizon.index_of(row.iso_year, row.iso_week) - 1] = \
                row.ili_per_100
        influenza[name] = arr

    rcp = {}
    for pathway, path in (("rcp26", rcp26), ("rcp45", rcp45), ("rcp85", rcp85)):
        df = pd.read_csv(path)
        if "cell_id" in df.columns:
            weights = pd.read_csv(cfg.population_grid)
            rcp[pathway] = ft.population_weighted_series(df, weights)
        else:
            rcp[pathway] = ft.read_regional_daily(df)

    history = ft.raw_parents(frame, n_weeks=3)
    scenarios = sc.assemble_scenarios(rcp, influenza, horizon, artifacts,
                                      history=history, ha_per_1000=ha_assumption)
    scenarios.save(cfg.output_dir)
    outputs = [cfg.artifact(f"scenario_{label}.csv") for label in scenarios.frames]
    outputs.append(cfg.artifact("scenario_provenance.json"))
    return {"inputs": [Path(p) for p in (rcp26, rcp45, rcp85)] +
                      [cfg.artifact("sirs_scenarios.csv")],
            "outputs": outputs}


def emit_charts(bands: fc.PredictionBands, outdir, observed=None, baseline=None,
                best_estimate=None) -> list[Path]:
    """One deterministic SVG per (region, age group): band plus optional lines."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mortregime"
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    R, X, T = bands.q50.shape
    if T == 0 or R == 0:
        warnings.warn("no band cells to chart", stacklevel=2)
        return []
    t = np.arange(1, T + 1)
    paths = []
    for r in range(R):
        for x in range(X):
            fig, ax = plt.subplots(figsize=(8, 3.2))
            ax.fill_between(t, bands.q025[r, x], bands.q975[r, x], alpha=0.3,
                            color="tab:blue", label="95% band")
            ax.plot(t, bands.q50[r, x], color="tab:blue", lw=1.0, label="median")
            if observed is not None:
                ax.plot(t, observed[r, x], color="0.4", lw=0.8, label="observed")
            if baseline is not None:
                ax.plot(t, baseline[r, x], color="tab:red", lw=0.9, label="baseline")
            if best_estimate is not None:
                ax.plot(t, best_estimate[r, x], color="tab:green", lw=0.9,
                        label="best estimate")
            ax.set_xlabel("week")
            ax.set_ylabel(bands.metric)
            ax.set_title(f"{bands.regions[r]} {bands.age_groups[x]}")
            ax.legend(loc="upper right", fontsize=7)
            safe_age = re.sub(r"[^A-Za-z0-9_-]", "_", str(bands.age_groups[x]))
            path = outdir / f"{bands.regions[r]}_{safe_age}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Pipeline driver with content-hash stage skipping

PIPELINE = ("ingest", "features", "fit-baseline", "fit-regime", "fim")


def run_pipeline(cfg: ProjectConfig) -> int:
    cfg.validate()
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    manifest_path = cfg.artifact("run_manifest.json")
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    stage_fns = {
        "ingest": stage_ingest,
        "features": stage_features,
        "fit-baseline": stage_fit_baseline,
        "fit-regime": stage_fit_regime,
        "fim": stage_fim,
    }
    for stage in PIPELINE:
        record = manifest.get(stage)
        if record and record.get("config_hash") == cfg.config_hash and _record_fresh(record):
            print(f"[skip] {stage}: artifacts up to date")
            continue
        print(f"[run ] {stage}")
        try:
            io = stage_fns[stage](cfg)
        except Exception:
            for out in (record or {}).get("outputs", {}):
                marker = Path(str(out) + ".failed")
                marker.touch()
            raise
        manifest[stage] = {
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "inputs": {str(p): _sha256(p) for p in io["inputs"]},
            "outputs": {str(p): _sha256(p) for p in io["outputs"]},
        }
        manifest_path.write_text(json.dumps(manifest, indent=1))
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return EXIT_OK


def _record_fresh(record: dict) -> bool:
    try:
        for path, digest in record["inputs"].items():
            if _sha256(path) != digest:
                return False
        for path, digest in record["outputs"].items():
            if _sha256(path) != digest:
                return False
    except (OSError, KeyError):
        return False
    return True


def _embed_meta(path: Path, cfg: ProjectConfig) -> None:
    payload = json.loads(Path(path).read_text())
    payload["config_hash"] = cfg.config_hash
    payload["seed"] = cfg.seed
    Path(path).write_text(json.dumps(payload))


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mortregime",
        description="Weekly mortality modeling pipeline: seasonal baseline, "
                    "regime-switching calibration, uncertainty, and scenarios.")
    parser.add_argument("--config", required=True, help="project INI configuration file")
    parser.add_argument("--threads", type=int, default=None,
                        help="global cap on worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", help="run ingest through fim with stage skipping")
    sub.add_parser("ingest", help="validate and normalize the input panel")
    sub.add_parser("features", help="construct the covariate frame")

    p = sub.add_parser("fit-baseline", help="fit the penalized seasonal baseline")
    p.add_argument("--lambda-grid", default=None,
                   help="comma list of candidate smoothing weights")
    p.add_argument("--mask-weeks", default=None,
                   help="weeks to exclude, e.g. 2020-W12:2020-W16")

    p = sub.add_parser("fit-regime", help="calibrate the regime-switching layer")
    p.add_argument("--spec", default=None, help="regime covariate spec file")
    p.add_argument("--tau-grid", default=None, help="comma list of precision candidates")
    p.add_argument("--epsilon", type=float, default=None, help="EM convergence threshold")

    p = sub.add_parser("fim", help="estimate the regime Fisher information")
    p.add_argument("--replicates", type=int, default=None, help="Monte Carlo replicates M")
    p.add_argument("--scale", type=float, default=None, help="perturbation scale c")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("forecast", help="bootstrap prediction bands")
    p.add_argument("--scenario", default=None, help="scenario feature file (CSV)")
    p.add_argument("--B", type=int, default=None, help="bootstrap sample count")
    p.add_argument("--toggles", default=None,
                   help="uncertainty sources, e.g. param,spatial,state,poisson")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--metric", choices=fc.METRICS, default="deaths")
    p.add_argument("--emit-charts", default=None, help="directory for band charts")

    p = sub.add_parser("scenario-sirs", help="fit and forecast the influenza model")
    p.add_argument("--iterations", type=int, default=6000)
    p.add_argument("--burn-in", type=int, default=3000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon-end", default=None, help="last forecast week, e.g. 2029-W52")

    p = sub.add_parser("assemble-scenarios", help="pair temperature and influenza scenarios")
    p.add_argument("--rcp26", required=True)
    p.add_argument("--rcp45", required=True)
    p.add_argument("--rcp85", required=True)
    p.add_argument("--ha-assumption", type=float, default=0.0,
                   help="hospital admissions level over the horizon (per 1,000)")

    p = sub.add_parser("simulate", help="simulate a synthetic panel from the fitted model")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("charts", help="render band charts from bands.csv")
    p.add_argument("--out", default=None, help="chart output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ProjectConfig.from_ini(args.config)
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.validate()
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)

        if args.command == "run":
            return run_pipeline(cfg)
        if args.command == "ingest":
            stage_ingest(cfg)
        elif args.command == "features":
            stage_features(cfg)
        elif args.command == "fit-baseline":
            if args.lambda_grid is not None:
                cfg.lambda_grid = tuple(float(v) for v in args.lambda_grid.split(","))
            if args.mask_weeks is not None:
                cfg.mask_weeks = parse_mask_weeks(args.mask_weeks)
            stage_fit_baseline(cfg)
        elif args.command == "fit-regime":
            if args.spec is not None:
                cfg.spec_file = Path(args.spec)
            if args.tau_grid is not None:
                cfg.tau_grid = tuple(float(v) for v in args.tau_grid.split(","))
            if args.epsilon is not None:
                cfg.epsilon = args.epsilon
            stage_fit_regime(cfg)
        elif args.command == "fim":
            if args.replicates is not None:
                cfg.fim_replicates = args.replicates
            if args.scale is not None:
                cfg.fim_scale = args.scale
            if args.seed is not None:
                cfg.seed = args.seed
            stage_fim(cfg)
        elif args.command == "forecast":
            stage_forecast(cfg, scenario_file=args.scenario, B=args.B,
                           toggles=args.toggles, seed=args.seed,
                           emit_charts_dir=args.emit_charts, metric=args.metric)
        elif args.command == "scenario-sirs":
            stage_scenario_sirs(cfg, iterations=args.iterations, burn_in=args.burn_in,
                                seed=args.seed, horizon_end=args.horizon_end)
        elif args.command == "assemble-scenarios":
            stage_assemble_scenarios(cfg, args.rcp26, args.rcp45, args.rcp85,
                                     ha_assumption=args.ha_assumption)
        elif args.command == "simulate":
            stage_simulate(cfg, seed=args.seed)
        elif args.command == "charts":
            bands = _load_bands(cfg.artifact("bands.csv"))
            emit_charts(bands, args.out or cfg.artifact("charts"))
        return EXIT_OK
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, configparser.Error) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FloatingPointError, np.linalg.LinAlgError, em_mod.ConvergenceError,
            em_mod.EmDivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _load_bands(path) -> fc.PredictionBands:
    df = pd.read_csv(path)
    regions = tuple(sorted(df["region"].unique()))
    ages = tuple(sorted(df["age_group"].unique()))
    labels = df[["iso_year", "iso_week"]].drop_duplicates().sort_values(
        ["iso_year", "iso_week"])
    weeks = pn.WeekIndex(labels["iso_year"].to_numpy(np.int64),
                         labels["iso_week"].to_numpy(np.int64))
    shape = (len(regions), len(ages), weeks.T)
    arrays = {k: np.zeros(shape) for k in ("q025", "q50", "q975")}
    rpos = {r: i for i, r in enumerate(regions)}
    xpos = {x: i for i, x in enumerate(ages)}
    for row in df.itertuples(index=False):
        t = weeks.index_of(int(row.iso_year), int(row.iso_week)) - 1
        for k in arrays:
            arrays[k][rpos[row.region], xpos[row.age_group], t] = getattr(row, k)
    metric = df["metric"].iloc[0] if len(df) else "deaths"
    return fc.PredictionBands(regions, ages, weeks, arrays["q025"], arrays["q50"],
                              arrays["q975"], B=0, metric=metric)


if __name__ == "__main__":
    sys.exit(main())
