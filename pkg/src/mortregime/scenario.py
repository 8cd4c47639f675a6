"""Forecast-horizon covariates: temperature pathways and an influenza SIRS model.

The influenza generator is a discrete-time stochastic SIRS recursion on weekly
new infections with 13 four-week seasonal blocks, a transmission exponent,
re-susceptibility flow, and latent uniform noise, fitted per region with an
adaptive component-wise random-walk Metropolis sampler. Posterior predictive
trajectories give moderate/high/severe incidence scenarios that are paired
with temperature pathways into full covariate frames.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .features import (DailyRegionalSeries, FeatureArtifacts, FeatureFrame,
                       build_features)
from .panel import WeekIndex

N_SEASON_BLOCKS = 13

DEFAULT_PAIRINGS = (
    ("scenario1", "rcp26", "moderate"),
    ("scenario2", "rcp45", "high"),
    ("scenario3", "rcp85", "severe"),
)
SCENARIO_QUANTILES = {"moderate": 0.50, "high": 0.80, "severe": 0.95}


def q_of_week(w: int) -> int:
    """Seasonal block index in 1..13 for ISO week w."""
    if not 1 <= w <= 53:
        raise ValueError("ISO week must be in 1..53")
    if w % 4 == 0:
        return w // 4
    return min(w // 4 + 1, N_SEASON_BLOCKS)


@dataclass(frozen=True)
class SirsParams:
    """Static parameters of the weekly SIRS recursion."""

    phi: np.ndarray       # (13,) seasonal block effects
    psi: float            # re-susceptibility rate in [0, 1]
    kappa: float          # transmission exponent > 0
    zeta: float           # upper bound of the uniform noiseterms

    def __post_init__(self):
        if len(self.phi) != N_SEASON_BLOCKS:
            raise ValueError(f"phi must have {N_SEASON_BLOCKS} entries")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError("psi must lie in [0, 1]")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")


def sirs_step(S_prev: float, R_prev: float, I_prev: float, I_prev2: float,
              N: float, kappa: float, psi: float, r_t: float, eps: float,
              rng: np.random.Generator | None = None):
    """One week of the SIRS recursion; deterministic when `rng` is None.

    Returns (lambda_t, I_t, S_t, R_t). A susceptible count pushed below zero
    is clipped with a warning; the expected rather than realized infections
    leave the susceptible pool, so total population is not exactly conserved.
    """
    if min(S_prev, R_prev, I_prev, I_prev2) < 0 or N <= 0:
        raise ValueError("compartments must be nonnegative and N positive")
    lam = S_prev / N * (I_prev + I_prev2) ** kappa * math.exp(r_t + eps)
    I_t = float(rng.poisson(lam)) if rng is not None else lam
    S_t = S_prev - lam + psi * R_prev
    if S_t < 0:
        warnings.warn("susceptible compartment clipped at zero", stacklevel=2)
        S_t = 0.0
    R_t = (1.0 - psi) * R_prev + I_prev
    return lam, I_t, S_t, R_t


@njit(cache=True)
def _sirs_loglik(phi, psi, kappa, eps, I, qidx, N, S0, R0):
    """Poisson log-likelihood of observed infections given latent noise.

    Compartments roll deterministically using the observed infection series;
    the likelihood covers weeks with two lags of history. Returns (ll, clips).
    """
    T = I.shape[0]
    S = S0
    R = R0
    ll = 0.0
    clips = 0
    for t in range(2, T):
        lam = S / N * (I[t - 1] + I[t - 2]) ** kappa * math.exp(phi[qidx[t] - 1] + eps[t])
        if not np.isfinite(lam):
            return -np.inf, clips
        if lam > 0.0:
            ll += I[t] * math.log(lam) - lam - math.lgamma(I[t] + 1.0)
        elif I[t] > 0.0:
            return -np.inf, clips
        S = S - lam + psi * R
        if S < 0.0:
            S = 0.0
            clips += 1
        R = (1.0 - psi) * R + I[t - 1]
    return ll, clips


@njit(cache=True)
def _sirs_final_state(phi, psi, kappa, eps, I, qidx, N, S0, R0):
    """Compartments after rolling through the observed series."""
    T = I.shape[0]
    S = S0
    R = R0
    for t in range(2, T):
        lam = S / N * (I[t - 1] + I[t - 2]) ** kappa * math.exp(phi[qidx[t] - 1] + eps[t])
        S = S - lam + psi * R
        if S < 0.0:
            S = 0.0
        R = (1.0 - psi) * R + I[t - 1]
    return S, R


@dataclass
class SirsPosterior:
    """Thinned posterior samples with sampler diagnostics."""

    phi: np.ndarray     # (n, 13)
    psi: np.ndarray
    kappa: np.ndarray
    zeta: np.ndarray
    eps: np.ndarray     # (n, T)
    acceptance: dict[str, float]
    clip_events: int
    S_init: float
    R_init: float
    N: float

    @property
    def n_samples(self) -> int:
        return len(self.psi)


DEFAULT_PRIORS = {"psi": (0.0, 1.0), "kappa": (0.5, 1.5), "zeta": (0.0, 1.0)}


def sirs_mcmc(observed: np.ndarray, N: float, week_numbers: np.ndarray,
              iterations: int = 6000, burn_in: int = 3000,
              seed: int | np.random.Generator = 0,
              priors: dict = None, n_samples: int = 1000,
              r_init: float | None = None) -> SirsPosterior:
    """Adaptive random-walk Metropolis over (phi, psi, kappa, zeta, eps).

    Block effects get standard normal priors; psi, kappa, zeta get uniform
    priors on the ranges in `priors`; the noise terms are latent uniforms on
    [0, zeta]. Component step sizes adapt toward a 0.44 acceptance rate
    during burn-in; retained draws are thinned to at most `n_samples`.
    """
    I = np.asarray(observed, float)
    T = len(I)
    if T < 8:
        raise ValueError("need at least 8 observed weeks")
    if iterations <= burn_in:
        raise ValueError("iterations must exceed burn_in")
    priors = {**DEFAULT_PRIORS, **(priors or {})}
    qidx = np.array([q_of_week(int(w)) for w in week_numbers], dtype=np.int64)
    if len(qidx) != T:
        raise ValueError("week_numbers must align with the observed series")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    R0 = float(I[:4].sum()) if r_init is None else float(r_init)
    S0 = max(N - R0, 0.0)

    psi_lo, psi_hi = priors["psi"]
    kap_lo, kap_hi = priors["kappa"]
    zet_lo, zet_hi = priors["zeta"]

    phi = np.zeros(N_SEASON_BLOCKS)
    # Moment-matched start: solve the recursion's log for phi with eps = 0.
    for j in range(1, N_SEASON_BLOCKS + 1):
        tsel = [t for t in range(2, T) if qidx[t] == j]
        if tsel:
            vals = [math.log((I[t] + 0.5) / max(0.9 * (I[t - 1] + I[t - 2]) + 0.5, 0.5))
                    for t in tsel]
            phi[j - 1] = float(np.mean(vals))
    psi = 0.5 * (psi_lo + psi_hi)
    kappa = min(max(1.0, kap_lo), kap_hi)
    zeta = min(max(0.05, zet_lo + 1e-6), zet_hi)
    eps = np.full(T, zeta / 2.0)
    eps[:2] = 0.0

    def loglik(phi_, psi_, kappa_, eps_):
        return _sirs_loglik(phi_, psi_, kappa_, eps_, I, qidx, N, S0, R0)

    ll, clips_now = loglik(phi, psi, kappa, eps)
    if not np.isfinite(ll):
        raise FloatingPointError("initial SIRS state has zero likelihood")
    clip_events = 0

    active_eps = list(range(2, T))
    comp_names = ([f"phi{j}" for j in range(N_SEASON_BLOCKS)]
                  + ["psi", "kappa", "zeta"] + [f"eps{t}" for t in active_eps])
    scales = {name: 0.1 for name in comp_names}
    accepts = {name: 0 for name in comp_names}
    batch_accepts = {name: 0 for name in comp_names}
    kept = {"phi": [], "psi": [], "kappa": [], "zeta": [], "eps": []}
    n_eps = len(active_eps)

    for it in range(iterations):
        # Seasonal block effects (normal(0, 1) priors).
        for j in range(N_SEASON_BLOCKS):
            name = f"phi{j}"
            prop = phi.copy()
            prop[j] += scales[name] * rng.standard_normal()
            new_ll, cl = loglik(prop, psi, kappa, eps)
            delta = (new_ll - ll) - 0.5 * (prop[j] ** 2 - phi[j] ** 2)
            if math.log(rng.random()) < delta:
                phi, ll = prop, new_ll
                accepts[name] += 1
                batch_accepts[name] += 1
                clip_events += cl

        for name, cur, lo, hi in (("psi", psi, psi_lo, psi_hi),
                                  ("kappa", kappa, kap_lo, kap_hi)):
            prop = cur + scales[name] * rng.standard_normal()
            if lo <= prop <= hi:
                if name == "psi":
                    new_ll, cl = loglik(phi, prop, kappa, eps)
                else:
                    new_ll, cl = loglik(phi, psi, prop, eps)
                if math.log(rng.random()) < new_ll - ll:
                    ll = new_ll
                    accepts[name] += 1
                    batch_accepts[name] += 1
                    clip_events += cl
                    if name == "psi":
                        psi = prop
                    else:
                        kappa = prop
        # zeta: likelihood-free given eps; prior density (1/zeta)^n_eps.
        prop = zeta + scales["zeta"] * rng.standard_normal()
        if max(zet_lo, eps[2:].max(initial=0.0)) <= prop <= zet_hi and prop > 0:
            delta = -n_eps * (math.log(prop) - math.log(zeta))
            if math.log(rng.random()) < delta:
                zeta = prop
                accepts["zeta"] += 1
                batch_accepts["zeta"] += 1

        for t in active_eps:
            name = f"eps{t}"
            prop_val = eps[t] + scales[name] * rng.standard_normal()
            if 0.0 <= prop_val <= zeta:
                prop = eps.copy()
                prop[t] = prop_val
                new_ll, cl = loglik(phi, psi, kappa, prop)
                if math.log(rng.random()) < new_ll - ll:
                    eps, ll = prop, new_ll
                    accepts[name] += 1
                    batch_accepts[name] += 1
                    clip_events += cl

        if it < burn_in and (it + 1) % 50 == 0:
            batch_no = (it + 1) // 50
            for name in comp_names:
                rate = batch_accepts[name] / 50.0
                scales[name] *= math.exp((rate - 0.44) / math.sqrt(batch_no))
                batch_accepts[name] = 0

        if it >= burn_in:
            kept["phi"].append(phi.copy())
            kept["psi"].append(psi)
            kept["kappa"].append(kappa)
            kept["zeta"].append(zeta)
            kept["eps"].append(eps.copy())

    n_kept = len(kept["psi"])
    stride = max(1, n_kept // n_samples)
    sel = slice(0, None, stride)
    acceptance = {name: accepts[name] / iterations for name in comp_names}
    overall = float(np.mean(list(acceptance.values())))
    if not 0.05 <= overall <= 0.6:
        warnings.warn(
            f"mean Metropolis acceptance rate {overall:.3f} outside [0.05, 0.6]; "
            f"per-component rates: { {k: round(v, 3) for k, v in acceptance.items()} }",
            stacklevel=2)
    return SirsPosterior(
        phi=np.asarray(kept["phi"])[sel][:n_samples],
        psi=np.asarray(kept["psi"])[sel][:n_samples],
        kappa=np.asarray(kept["kappa"])[sel][:n_samples],
        zeta=np.asarray(kept["zeta"])[sel][:n_samples],
        eps=np.asarray(kept["eps"])[sel][:n_samples],
        acceptance=acceptance, clip_events=clip_events,
        S_init=S0, R_init=R0, N=N)


def sirs_forecast(posterior: SirsPosterior, observed: np.ndarray,
                  week_numbers: np.ndarray, horizon_weeks: np.ndarray,
                  rng: np.random.Generator,
                  levels: tuple[float, ...] = (0.50, 0.80, 0.95),
                  stochastic: bool = True) -> dict[float, np.ndarray]:
    """Point-wise posterior-predictive quantile trajectories over the horizon.

    Every retained posterior draw is propagated as one full trajectory:
    compartments roll through the observed window with the draw's latent
    noise, then future infections are sampled week by week (Poisson draws
    with fresh uniform noise; deterministic recursion when `stochastic` is
    off). Returns {level: (H,) trajectory}.
    """
    I = np.asarray(observed, float)
    qidx = np.array([q_of_week(int(w)) for w in week_numbers], dtype=np.int64)
    q_future = np.array([q_of_week(int(w)) for w in horizon_weeks], dtype=np.int64)
    H = len(q_future)
    n = posterior.n_samples
    paths = np.empty((n, H))
    for i in range(n):
        S, R = _sirs_final_state(posterior.phi[i], posterior.psi[i], posterior.kappa[i],
                                 posterior.eps[i], I, qidx, posterior.N,
                                 posterior.S_init, posterior.R_init)
        prev, prev2 = I[-1], I[-2]
        zeta = posterior.zeta[i]
        for h in range(H):
            eps = rng.uniform(0.0, zeta) if (stochastic and zeta > 0) else 0.0
            r_t = posterior.phi[i][q_future[h] - 1]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                lam, I_new, S, R = sirs_step(S, R, prev, prev2, posterior.N,
                                             posterior.kappa[i], posterior.psi[i],
                                             r_t, eps, rng if stochastic else None)
            paths[i, h] = I_new
            prev2, prev = prev, I_new
    return {lvl: np.quantile(paths, lvl, axis=0, method="linear") for lvl in levels}


@dataclass
class ScenarioSet:
    """Named covariate frames over the forecast horizon with provenance."""

    frames: dict[str, FeatureFrame]
    provenance: dict[str, dict] = field(default_factory=dict)

    def save(self, directory) -> None:
        import json
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for label, frame in self.frames.items():
            frame.save(directory / f"scenario_{label}.csv")
        with open(directory / "scenario_provenance.json", "w") as fh:
            json.dump(self.provenance, fh, indent=1)


def assemble_scenarios(rcp_series: dict[str, DailyRegionalSeries],
                       influenza: dict[str, np.ndarray],
                       horizon_weeks: WeekIndex,
                       artifacts: FeatureArtifacts,
                       history: dict[str, np.ndarray] | None = None,
                       ha_per_1000: float | np.ndarray = 0.0,
                       pairings=DEFAULT_PAIRINGS) -> ScenarioSet:
    """Pair temperature pathways with influenza severity levels.

    Features are rebuilt with the frozen calibration artifacts (thresholds,
    climatology, seasonal norms, hinge quantiles, scalers); hospital
    admissions default to zero over the horizon. `history` supplies the last
    calibration weeks of the raw parent columns so lagged covariates are
    defined from the first horizon week.
    """
    frames = {}
    provenance = {}
    for label, pathway, level in pairings:
        if pathway not in rcp_series:
            raise ValueError(f"missing temperature pathway {pathway!r}")
        if level not in influenza:
            raise ValueError(f"missing influenza scenario {level!r}")
        temp = rcp_series[pathway]
        ili = influenza[level]
        R, T = len(temp.regions), horizon_weeks.T
        if ili.shape != (R, T):
            raise ValueError(f"influenza scenario {level!r} must be (R, T) = {(R, T)}")
        ha = np.broadcast_to(np.asarray(ha_per_1000, float), (R, T)).copy()
        frame, _ = build_features(temp, ili, ha, horizon_weeks,
                                  artifacts=artifacts, history=history)
        frames[label] = frame
        provenance[label] = {"temperature_pathway": pathway,
                             "influenza_level": level,
                             "ha_assumption": float(np.asarray(ha_per_1000).mean())}
    return ScenarioSet(frames, provenance)
