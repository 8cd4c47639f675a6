"""Seasonal weekly mortality baseline: spatially penalized Poisson regression.

Per region and age group the log baseline rate is a linear trend plus annual
and semi-annual Fourier terms in the ISO week number. Coefficients are
coupled across neighbouring regions through a graph-Laplacian penalty, with
per-basis smoothing weights selected by unbiased risk estimation (UBRE).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .panel import MortalityPanel, RegionGraph, WeekIndex, WEEKS_PER_YEAR

N_BASIS = 6
DEFAULT_LAMBDA_GRID = (0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


def design_row(t: int, w: int) -> np.ndarray:
    """Six-component Serfling basis row for week ordinal t and ISO week w."""
    ang1 = 2.0 * np.pi * w / WEEKS_PER_YEAR
    ang2 = 2.0 * np.pi * w / (WEEKS_PER_YEAR / 2.0)
    return np.array([1.0, float(t), np.sin(ang1), np.cos(ang1), np.sin(ang2), np.cos(ang2)])


def design_matrix(weeks: WeekIndex, t_offset: int = 0) -> np.ndarray:
    """(T, 6) stacked basis rows; `t_offset` shifts the trend ordinal."""
    t = np.arange(1, weeks.T + 1, dtype=float) + t_offset
    w = weeks.iso_weeks.astype(float)
    ang1 = 2.0 * np.pi * w / WEEKS_PER_YEAR
    ang2 = 2.0 * np.pi * w / (WEEKS_PER_YEAR / 2.0)
    return np.column_stack([np.ones_like(t), t, np.sin(ang1), np.cos(ang1),
                            np.sin(ang2), np.cos(ang2)])


@dataclass
class BaselineFit:
    """Fitted baseline: coefficients, smoothing weights, fitted means, information."""

    regions: tuple[str, ...]
    age_groups: tuple[str, ...]
    first_week: tuple[int, int]
    gamma: np.ndarray          # (R, X, 6)
    lambdas: np.ndarray        # (6,)
    fitted_b: np.ndarray       # (R, X, T)
    fisher: np.ndarray         # (X, 6R, 6R) penalized information per age group
    edf: float
    n: int
    deviance: float
    schema_version: int = 1

    def save(self, path) -> None:
        payload = {
            "schema_version": self.schema_version,
            "regions": list(self.regions),
            "age_groups": list(self.age_groups),
            "first_week": list(self.first_week),
            "gamma": self.gamma.tolist(),
            "lambdas": self.lambdas.tolist(),
            "fitted_b": self.fitted_b.tolist(),
            "fisher": self.fisher.tolist(),
            "edf": self.edf,
            "n": self.n,
            "deviance": self.deviance,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "BaselineFit":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            regions=tuple(payload["regions"]),
            age_groups=tuple(payload["age_groups"]),
            first_week=tuple(payload["first_week"]),
            gamma=np.asarray(payload["gamma"], float),
            lambdas=np.asarray(payload["lambdas"], float),
            fitted_b=np.asarray(payload["fitted_b"], float),
            fisher=np.asarray(payload["fisher"], float),
            edf=float(payload["edf"]),
            n=int(payload["n"]),
            deviance=float(payload["deviance"]),
            schema_version=int(payload["schema_version"]),
        )


def _poisson_deviance(d: np.ndarray, mu: np.ndarray, w: np.ndarray) -> float:
    return float(2.0 * np.sum(w * (xlogy(d, d / mu) - (d - mu))))


def _penalty_matrix(L: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """Coefficient coupling K with region-major ordering: K = L (x) diag(lambda)."""
    return np.kron(L, np.diag(lambdas))


def penalty_value(gamma_x: np.ndarray, L: np.ndarray, lambdas: np.ndarray) -> float:
    """sum_p lambda_p * gamma_p' L gamma_p for one age group, gamma_x (R, 6)."""
    return float(np.sum(lambdas * np.einsum("rp,rs,sp->p", gamma_x, L, gamma_x)))


def objective(panel: MortalityPanel, graph: RegionGraph, gamma: np.ndarray,
              lambdas: np.ndarray) -> float:
    """Penalized negative log-likelihood (up to the d! constant), all age groups."""
    X = design_matrix(panel.weeks)
    L = graph.laplacian
    w = panel.weight_mask.astype(float)
    total = 0.0
    for x in range(len(panel.age_groups)):
        eta = gamma[:, x, :] @ X.T
        mu = panel.exposures[:, x, :] * np.exp(eta)
        ll = np.sum(w * (panel.deaths[:, x, :] * np.log(mu) - mu))
        total += -ll + penalty_value(gamma[:, x, :], L, lambdas)
    return total


def objective_gradient(panel: MortalityPanel, graph: RegionGraph, gamma: np.ndarray,
                       lambdas: np.ndarray) -> np.ndarray:
    """Gradient of `objective` w.r.t. gamma, same (R, X, 6) layout."""
    X = design_matrix(panel.weeks)
    L = graph.laplacian
    w = panel.weight_mask.astype(float)
    grad = np.empty_like(gamma)
    for x in range(len(panel.age_groups)):
        eta = gamma[:, x, :] @ X.T
        mu = panel.exposures[:, x, :] * np.exp(eta)
        resid = w * (panel.deaths[:, x, :] - mu)
        grad[:, x, :] = -(resid @ X) + 2.0 * np.einsum("rs,sp,p->rp", L, gamma[:, x, :], lambdas)
    return grad


def _fit_age_group(d: np.ndarray, E: np.ndarray, w_mask: np.ndarray, X: np.ndarray,
                   L: np.ndarray, lambdas: np.ndarray,
                   gamma0: np.ndarray | None = None,
                   tol: float = 1e-9, gtol: float = 5e-7, max_iter: int = 200):
    """Penalized IRLS for one age group; d, E are (R, T). Returns a dict."""
    R, T = d.shape
    K2 = 2.0 * _penalty_matrix(L, lambdas)
    if gamma0 is None:
        # log((d + 0.5)/E) regressed on the basis per region, masked weeks excluded
        y0 = np.log((d + 0.5) / E)
        Xw = X * w_mask[:, None]
        XtX = X.T @ Xw
        gamma0 = np.linalg.solve(XtX, (Xw.T @ y0.T)).T
    gamma = gamma0.copy()

    def pen_obj(g):
        eta = g @ X.T
        mu = E * np.exp(eta)
        if not np.all(np.isfinite(mu)):
            return np.inf, None, None
        dev = _poisson_deviance(d, np.maximum(mu, 1e-300), w_mask[None, :])
        pen = float(np.sum(lambdas * np.einsum("rp,rs,sp->p", g, L, g)))
        return dev + 2.0 * pen, eta, mu

    def grad_norm(g, mu):
        resid = w_mask[None, :] * (d - mu)
        grad = -(resid @ X) + (K2 @ g.reshape(-1)).reshape(R, N_BASIS)
        return np.max(np.abs(grad))

    obj, eta, mu = pen_obj(gamma)
    if not np.isfinite(obj):
        raise FloatingPointError("baseline IRLS: non-finite objective at the start values")
    for _ in range(max_iter):
        wgt = w_mask[None, :] * mu
        z = eta + (d - mu) / mu
        H = np.zeros((N_BASIS * R, N_BASIS * R))
        b = np.zeros(N_BASIS * R)
        for r in range(R):
            Xw = X * wgt[r][:, None]
            sl = slice(N_BASIS * r, N_BASIS * (r + 1))
            H[sl, sl] = X.T @ Xw
            b[sl] = Xw.T @ z[r]
        H += K2
        gamma_new = np.linalg.solve(H, b).reshape(R, N_BASIS)

        step = gamma_new - gamma
        new_obj, new_eta, new_mu = pen_obj(gamma_new)
        halvings = 0
        while (not np.isfinite(new_obj) or new_obj > obj + 1e-10 * (abs(obj) + 1.0)) \
                and halvings < 40:
            step *= 0.5
            gamma_new = gamma + step
            new_obj, new_eta, new_mu = pen_obj(gamma_new)
            halvings += 1
        if not np.isfinite(new_obj):
            raise FloatingPointError(
                "baseline IRLS: working weights overflowed and step-halving failed")
        rel = abs(obj - new_obj) / (abs(new_obj) + 1e-12)
        gamma, obj, eta, mu = gamma_new, new_obj, new_eta, new_mu
        # Converged once the deviance has settled and the optimum is sharp;
        # rel < 1e-15 guards against float-level stagnation at huge penalties.
        if (rel < tol and grad_norm(gamma, mu) < gtol) or rel < 1e-15:
            break

    wgt = w_mask[None, :] * mu
    info = np.zeros((N_BASIS * R, N_BASIS * R))
    xtwx = np.zeros_like(info)
    for r in range(R):
        Xw = X * wgt[r][:, None]
        sl = slice(N_BASIS * r, N_BASIS * (r + 1))
        xtwx[sl, sl] = X.T @ Xw
    info = xtwx + K2
    edf = float(np.trace(np.linalg.solve(info, xtwx)))
    dev = _poisson_deviance(d, mu, w_mask[None, :])
    return {"gamma": gamma, "mu": mu, "deviance": dev, "edf": edf, "fisher": info}


def _fit_all(panel: MortalityPanel, graph: RegionGraph, lambdas: np.ndarray,
             gamma0: np.ndarray | None = None):
    X = design_matrix(panel.weeks)
    L = graph.laplacian
    w_mask = panel.weight_mask.astype(float)
    if w_mask.sum() == 0:
        raise ValueError("no usable observations: every week is masked")
    results = []
    for x in range(len(panel.age_groups)):
        g0 = None if gamma0 is None else gamma0[:, x, :]
        results.append(_fit_age_group(panel.deaths[:, x, :], panel.exposures[:, x, :],
                                      w_mask, X, L, lambdas, gamma0=g0))
    return results


def ubre_score(panel: MortalityPanel, results) -> float:
    """UBRE = Dev/n - 1 + 2*edf/n with Poisson scale fixed at 1."""
    n = int(panel.weight_mask.sum()) * len(panel.regions) * len(panel.age_groups)
    dev = sum(r["deviance"] for r in results)
    edf = sum(r["edf"] for r in results)
    return dev / n - 1.0 + 2.0 * edf / n


def ubre_select(panel: MortalityPanel, graph: RegionGraph,
                lambda_grid=DEFAULT_LAMBDA_GRID) -> np.ndarray:
    """Per-basis smoothing weights by a one-pass coordinate grid search.

    Each basis index is scanned over the grid with the others held fixed
    (initialized at the grid median); ties prefer the larger, smoother value.
    """
    grid = sorted(float(v) for v in lambda_grid)
    if not grid:
        raise ValueError("lambda grid must be non-empty")
    lambdas = np.full(N_BASIS, grid[len(grid) // 2])
    if len(grid) == 1:
        return lambdas
    cache: dict[tuple, float] = {}

    def score(lam):
        key = tuple(lam)
        if key not in cache:
            cache[key] = ubre_score(panel, _fit_all(panel, graph, np.asarray(lam)))
        return cache[key]

    for p in range(N_BASIS):
        best_val, best_lam = np.inf, lambdas[p]
        for lam_p in grid:
            trial = lambdas.copy()
            trial[p] = lam_p
            val = score(trial)
            if val <= best_val:
                best_val, best_lam = val, lam_p
        lambdas[p] = best_lam
    return lambdas


def fit_baseline(panel: MortalityPanel, graph: RegionGraph,
                 lambda_grid=DEFAULT_LAMBDA_GRID,
                 lambdas=None) -> BaselineFit:
    """Fit the penalized seasonal baseline.

    Smoothing weights come from `ubre_select` over `lambda_grid` unless an
    explicit `lambdas` vector (length 6) is given.
    """
    if lambdas is None:
        lambdas = ubre_select(panel, graph, lambda_grid)
    lambdas = np.asarray(lambdas, float)
    if lambdas.shape != (N_BASIS,):
        raise ValueError(f"lambdas must have length {N_BASIS}")
    results = _fit_all(panel, graph, lambdas)
    R, X, T = panel.shape
    gamma = np.stack([r["gamma"] for r in results], axis=1)
    fitted = np.stack([r["mu"] for r in results], axis=1)
    fisher = np.stack([r["fisher"] for r in results], axis=0)
    n = int(panel.weight_mask.sum()) * R * X
    return BaselineFit(
        regions=panel.regions, age_groups=panel.age_groups,
        first_week=(panel.weeks.year_of(1), panel.weeks.week_of(1)),
        gamma=gamma, lambdas=lambdas, fitted_b=fitted, fisher=fisher,
        edf=float(sum(r["edf"] for r in results)), n=n,
        deviance=float(sum(r["deviance"] for r in results)))


def predict_baseline(fit: BaselineFit, weeks: WeekIndex, exposures: np.ndarray,
                     gamma: np.ndarray | None = None) -> np.ndarray:
    """Baseline means E * exp(design @ gamma) over `weeks`, (R, X, T').

    Week ordinals continue the calibration origin, so horizons beyond the fit
    window extrapolate the linear trend. Pass `gamma` to evaluate a parameter
    draw instead of the point estimate.
    """
    from .panel import _monday  # local import to keep the public surface tidy

    g = fit.gamma if gamma is None else gamma
    offset = (_monday(*(weeks.year_of(1), weeks.week_of(1))) - _monday(*fit.first_week)).days // 7
    X = design_matrix(weeks, t_offset=offset)
    eta = np.einsum("rxp,tp->rxt", g, X)
    return exposures * np.exp(eta)
