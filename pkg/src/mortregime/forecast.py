"""Best-estimate trajectories and bootstrap prediction bands.

The bootstrap layers four independently switchable uncertainty sources:
coefficient draws for the baseline and regime parameters, a fresh draw of the
spatial field, resampled regime-state chains, and Poisson count noise.
Samples are generated in fixed-size chunks with RNG streams derived
deterministically from the master seed, so bands are bit-identical for a
given (seed, B, toggles) regardless of how the work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .baseline import BaselineFit, design_matrix, predict_baseline
from .em import FilterState
from .panel import RegionGraph, WeekIndex, WEEKS_PER_YEAR, _monday
from .regime import (CovariateSet, LOGIT_CLAMP, RegimeParams, TRANSITION_LABELS,
                     icar_sample, pack_params, transition_log_matrices)

CHUNK = 1024
METRICS = ("deaths", "rate_per_1000py")


@dataclass(frozen=True)
class UncertaintyToggles:
    """Independent switches for the four bootstrap uncertainty layers."""

    parameter: bool = True
    spatial: bool = True
    state: bool = True
    poisson: bool = True

    @classmethod
    def parse(cls, text: str) -> "UncertaintyToggles":
        names = {s.strip() for s in text.split(",") if s.strip()}
        known = {"param", "parameter", "spatial", "state", "poisson"}
        unknown = names - known
        if unknown:
            raise ValueError(f"unknown uncertainty toggles {sorted(unknown)}")
        return cls(parameter=bool(names & {"param", "parameter"}),
                   spatial="spatial" in names, state="state" in names,
                   poisson="poisson" in names)

    @classmethod
    def none(cls) -> "UncertaintyToggles":
        return cls(False, False, False, False)


def best_estimate_states(fs: FilterState) -> np.ndarray:
    """Most probable filtered state per (region, week); ties pick the lowest state."""
    return np.argmax(fs.marginal, axis=2)


def best_estimate_deaths(states: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
                         params: RegimeParams) -> np.ndarray:
    """Expected deaths along a given state path, (R, X, T)."""
    from .regime import mean_exponents

    eta = mean_exponents(covs, params)[:, covs.group_of, :, :]
    sel = np.take_along_axis(eta, states[:, None, :, None], axis=3)[..., 0]
    return b_hat * np.exp(sel)


def initial_state_insample(params: RegimeParams, n_regions: int) -> np.ndarray:
    """Most probable initial state, replicated across regions."""
    return np.full(n_regions, int(np.argmax(params.rho)), dtype=np.int64)


def initial_state_forecast(fs: FilterState) -> np.ndarray:
    """Most probable filtered state at the end of the calibration period."""
    return np.argmax(fs.marginal[:, -1, :], axis=1)


def greedy_path(params: RegimeParams, u: np.ndarray, covs: CovariateSet,
                initial_state: np.ndarray) -> np.ndarray:
    """Deterministic best-estimate chain: argmax transition row at each step."""
    P = np.exp(transition_log_matrices(covs, params, u))
    R, T = covs.shape
    states = np.empty((R, T), dtype=np.int64)
    states[:, 0] = initial_state
    for t in range(1, T):
        states[:, t] = np.argmax(P[np.arange(R), t, states[:, t - 1], :], axis=1)
    return states


def rate_per_1000py(deaths: np.ndarray, exposures: np.ndarray) -> np.ndarray:
    """Deaths per 1,000 person-years from person-week exposures."""
    return deaths * (1000.0 * WEEKS_PER_YEAR) / exposures


@dataclass
class PredictionBands:
    """Quantile bands of predicted deaths or death rates per cell."""

    regions: tuple[str, ...]
    age_groups: tuple[str, ...]
    weeks: WeekIndex
    q025: np.ndarray
    q50: np.ndarray
    q975: np.ndarray
    B: int
    metric: str

    def to_frame(self) -> pd.DataFrame:
        R, X, T = self.q50.shape
        ridx, xidx, tidx = np.meshgrid(np.arange(R), np.arange(X), np.arange(T),
                                       indexing="ij")
        return pd.DataFrame({
            "region": np.asarray(self.regions)[ridx.ravel()],
            "age_group": np.asarray(self.age_groups)[xidx.ravel()],
            "iso_year": self.weeks.iso_years[tidx.ravel()],
            "iso_week": self.weeks.iso_weeks[tidx.ravel()],
            "q025": self.q025.ravel(),
            "q50": self.q50.ravel(),
            "q975": self.q975.ravel(),
            "metric": self.metric,
        })

    def save(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def _factor(cov: np.ndarray) -> np.ndarray:
    """Square root of a PSD matrix via its eigendecomposition (tolerates rank loss)."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _slice_draws(template: RegimeParams, draws: np.ndarray):
    """Split (n, q) flat parameter draws into per-block arrays."""
    n = draws.shape[0]
    G, k1 = template.alpha1.shape
    _, k2 = template.alpha2.shape
    pos = 0
    a1 = draws[:, pos:pos + G * k1].reshape(n, G, k1)
    pos += G * k1
    a2 = draws[:, pos:pos + G * k2].reshape(n, G, k2)
    pos += G * k2
    beta = {}
    for label in TRANSITION_LABELS:
        if label not in template.beta:
            continue
        k = len(template.beta[label])
        beta[label] = draws[:, pos:pos + k]
        pos += k
    return a1, a2, beta


def bootstrap_predict(baseline_fit: BaselineFit, weeks: WeekIndex,
                      exposures: np.ndarray, covs: CovariateSet,
                      params: RegimeParams, u: np.ndarray, tau: float,
                      graph: RegionGraph, toggles: UncertaintyToggles,
                      B: int = 25000, seed: int = 0,
                      sigma1: np.ndarray | None = None,
                      sigma2: np.ndarray | None = None,
                      initial_state: np.ndarray | None = None,
                      fixed_path: np.ndarray | None = None,
                      metric: str = "deaths") -> PredictionBands:
    """Bootstrap prediction bands over `weeks` for every (region, age group).

    Per sample: draw baseline and regime coefficients from their Gaussian
    approximations when the parameter toggle is on, a spatial field from the
    ICAR prior when the spatial toggle is on, a regime chain from the
    transition model when the state toggle is on (otherwise the fixed
    best-estimate path), and Poisson counts when the poisson toggle is on
    (otherwise expected counts). Bands are the 2.5/50/97.5 percentiles of
    the B samples; memory grows as B x ages x weeks per region.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    R, X, T = exposures.shape
    if covs.shape != (R, T):
        raise ValueError("covariates do not cover the requested horizon")
    if toggles.parameter and sigma2 is None:
        raise ValueError("parameter uncertainty requires sigma2 (regime covariance)")
    if initial_state is None:
        initial_state = initial_state_insample(params, R)
    if not toggles.state and fixed_path is None:
        fixed_path = greedy_path(params, u, covs, initial_state)

    b_point = predict_baseline(baseline_fit, weeks, exposures)
    offset = (_monday(weeks.year_of(1), weeks.week_of(1))
              - _monday(*baseline_fit.first_week)).days // 7
    X_design = design_matrix(weeks, t_offset=offset)
    theta = pack_params(params)
    q = theta.size

    if toggles.parameter:
        if sigma1 is None:
            sigma1 = np.stack([np.linalg.inv(f) for f in baseline_fit.fisher])
        fac1 = np.stack([_factor(s) for s in sigma1])       # (X, 6R, 6R)
        fac2 = _factor(sigma2)
        gamma_flat = np.stack([baseline_fit.gamma[:, x, :].ravel() for x in range(X)])

    master = np.random.SeedSequence(seed)
    param_ss, sim_ss = master.spawn(2)
    n_chunks = (B + CHUNK - 1) // CHUNK
    param_children = param_ss.spawn(n_chunks)
    sim_children = [child.spawn(R) for child in sim_ss.spawn(n_chunks)]

    q025 = np.empty((R, X, T))
    q50 = np.empty((R, X, T))
    q975 = np.empty((R, X, T))
    G = covs.n_groups

    for r in range(R):
        buffer = np.empty((B, X, T))
        for ci in range(n_chunks):
            b0 = ci * CHUNK
            n = min(CHUNK, B - b0)
            prng = np.random.default_rng(param_children[ci])
            srng = np.random.default_rng(sim_children[ci][r])

            # Parameter layer: identical draws are regenerated for every region.
            if toggles.parameter:
                gamma_r = np.empty((n, X, 6))
                for x in range(X):
                    eps = prng.standard_normal((n, gamma_flat.shape[1]))
                    flat = gamma_flat[x][None, :] + eps @ fac1[x].T
                    gamma_r[:, x, :] = flat[:, 6 * r:6 * (r + 1)]
                eps2 = prng.standard_normal((n, q))
                theta_draws = theta[None, :] + eps2 @ fac2.T
            else:
                gamma_r = None
                theta_draws = np.broadcast_to(theta, (n, q))
            a1, a2, beta = _slice_draws(params, theta_draws)

            # Spatial layer.
            if toggles.spatial:
                u_r = icar_sample(tau, graph, prng, size=n)[:, r]
            else:
                u_r = np.full(n, u[r])

            # Baseline means for this region.
            if gamma_r is not None:
                eta_b = np.einsum("nxp,tp->nxt", gamma_r, X_design)
                b_r = exposures[r][None] * np.exp(eta_b)
            else:
                b_r = np.broadcast_to(b_point[r], (n, X, T))

            # State layer.
            if toggles.state:
                eta_tr = {}
                for label in TRANSITION_LABELS:
                    zt = covs.ztr[label][r]                   # (T, k)
                    eta_tr[label] = np.clip(beta[label] @ zt.T + u_r[:, None],
                                            -LOGIT_CLAMP, LOGIT_CLAMP)
                states = np.empty((n, T), dtype=np.int64)
                states[:, 0] = initial_state[r]
                P_t = np.zeros((n, 3, 3))
                for t in range(1, T):
                    e01 = np.exp(eta_tr["01"][:, t])
                    e02 = np.exp(eta_tr["02"][:, t])
                    e11 = np.exp(eta_tr["11"][:, t])
                    e22 = np.exp(eta_tr["22"][:, t])
                    d0 = 1.0 + e01 + e02
                    P_t[:, 0, 0] = 1.0 / d0
                    P_t[:, 0, 1] = e01 / d0
                    P_t[:, 0, 2] = e02 / d0
                    d1 = 1.0 + e11
                    P_t[:, 1, 0] = 1.0 / d1
                    P_t[:, 1, 1] = e11 / d1
                    P_t[:, 1, 2] = 0.0
                    d2 = 1.0 + e22
                    P_t[:, 2, 0] = 1.0 / d2
                    P_t[:, 2, 1] = 0.0
                    P_t[:, 2, 2] = e22 / d2
                    rows = P_t[np.arange(n), states[:, t - 1], :]
                    states[:, t] = (srng.random(n)[:, None] >= rows.cumsum(axis=1)).sum(axis=1)
            else:
                states = np.broadcast_to(fixed_path[r], (n, T))

            # Shock amplification and Poisson layer.
            eta1 = np.einsum("ngk,tk->ngt", a1, covs.z1[r])   # (n, G, T)
            eta2 = np.einsum("ngk,tk->ngt", a2, covs.z2[r])
            eta_x = np.zeros((n, X, T))
            for x in range(X):
                g = covs.group_of[x]
                eta_x[:, x, :] = np.where(states == 1, eta1[:, g, :],
                                          np.where(states == 2, eta2[:, g, :], 0.0))
            mu = b_r * np.exp(eta_x)
            values = srng.poisson(mu).astype(float) if toggles.poisson else mu
            if metric == "rate_per_1000py":
                values = rate_per_1000py(values, exposures[r][None])
            buffer[b0:b0 + n] = values

        qs = np.quantile(buffer, [0.025, 0.5, 0.975], axis=0, method="linear")
        q025[r], q50[r], q975[r] = qs
    return PredictionBands(tuple(baseline_fit.regions), tuple(baseline_fit.age_groups),
                           weeks, q025, q50, q975, B, metric)


def coverage_check(bands: PredictionBands, observed: np.ndarray) -> float:
    """Fraction of cells whose observed value falls inside [q2.5, q97.5]."""
    inside = (observed >= bands.q025) & (observed <= bands.q975)
    return float(inside.mean())


def excess_deaths(scenario_q50: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """Relative excess over the horizon per (region, age group).

    Both inputs are (R, X, T) in the same metric (weekly rates per 1,000
    person-years, or deaths when exposures coincide); the result is
    (sum_t scenario - sum_t baseline) / sum_t baseline.
    """
    num = scenario_q50.sum(axis=2)
    den = baseline.sum(axis=2)
    if np.any(den == 0):
        raise ValueError("baseline sums to zero for at least one (region, age) cell")
    return (num - den) / den
