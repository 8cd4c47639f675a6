"""EM calibration of the regime-switching layer with a Laplace-approximated
spatial random effect.

The E-step runs a forward filter per region (all pmf products in log space),
the M-step splits into three blocks (shock-state Poisson regressions, the
transition logits with their log-determinant correction, and the closed-form
initial-state probabilities), and the spatial mode is refreshed by Newton
steps on the expected log joint density. The precision of the spatial prior
is profiled over a grid.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .panel import RegionGraph
from .regime import (CovariateSet, RegimeParams, TRANSITION_LABELS,
                     emission_logpmf, laplace_terms, spatial_hessian,
                     transition_log_matrices)


class ConvergenceError(RuntimeError):
    """An inner solver failed to reach its tolerance."""


class EmDivergenceError(RuntimeError):
    """The EM objective decreased repeatedly; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class FilterState:
    """Filtered regime-state probabilities and one-step predictive densities.

    joint[:, t] holds P(S_{t-1}=i, S_t=j | data through t) for t >= 2
    (index 1 onward; the first slice stays zero), marginal[:, t] the filtered
    state probabilities, and increments[:, t] the log one-step predictive
    density of week t's counts.
    """

    joint: np.ndarray       # (R, T, S, S)
    marginal: np.ndarray    # (R, T, S)
    increments: np.ndarray  # (R, T)

    @property
    def loglik(self) -> float:
        return float(self.increments.sum())


def _logsumexp_last(arr: np.ndarray) -> np.ndarray:
    m = arr.max(axis=-1)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    out = safe_m + np.log(np.exp(arr - safe_m[..., None]).sum(axis=-1))
    return np.where(np.isfinite(m), out, -np.inf)


def forward_filter(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
                   u: np.ndarray, params: RegimeParams,
                   tables=None) -> FilterState:
    """Run the three-step filtering recursion independently for each region.

    deaths, b_hat : (R, X, T); u : (R,). Accepts R = 1 for a single region.
    The summed increments equal the incomplete-data log-likelihood given u.
    """
    if tables is None:
        emis = emission_logpmf(deaths, b_hat, covs, params)
        logP = transition_log_matrices(covs, params, u)
    else:
        emis, logP = tables
    R, T, S = emis.shape
    joint = np.zeros((R, T, S, S))
    marginal = np.zeros((R, T, S))
    increments = np.empty((R, T))

    with np.errstate(divide="ignore"):
        log_rho = np.log(params.rho)
    cand0 = log_rho[None, :] + emis[:, 0, :]
    inc = _logsumexp_last(cand0)
    _check_normalizer(inc, 1)
    marginal[:, 0, :] = np.exp(cand0 - inc[:, None])
    increments[:, 0] = inc
    log_marg = cand0 - inc[:, None]

    for t in range(1, T):
        cand = log_marg[:, :, None] + logP[:, t] + emis[:, t, None, :]
        flat = cand.reshape(R, S * S)
        inc = _logsumexp_last(flat)
        _check_normalizer(inc, t + 1)
        jt = np.exp(cand - inc[:, None, None])
        joint[:, t] = jt
        mt = jt.sum(axis=1)
        marginal[:, t] = mt
        increments[:, t] = inc
        with np.errstate(divide="ignore"):
            log_marg = np.log(mt)
    return FilterState(joint, marginal, increments)


def _check_normalizer(inc: np.ndarray, t: int) -> None:
    if np.any(~np.isfinite(inc)):
        raise FloatingPointError(
            f"filter normalizer is zero at week t={t}: the model assigns zero "
            "probability to the observed counts")


def assemble_q(fs: FilterState, emis: np.ndarray, logP: np.ndarray,
               rho: np.ndarray, laplace_value: float) -> float:
    """Expected complete-data log-likelihood from precomputed tables.

    Zero-weight terms contribute zero even when the log term is -inf
    (structural zeros, impossible initial states).
    """
    def wsum(w, logterm):
        return float(np.where(w > 0, w * np.where(w > 0, logterm, 0.0), 0.0).sum())

    with np.errstate(divide="ignore"):
        log_rho = np.log(rho)
    q = wsum(fs.marginal, emis)
    q += wsum(fs.marginal[:, 0, :], np.broadcast_to(log_rho, fs.marginal[:, 0, :].shape))
    q += wsum(fs.joint[:, 1:], logP[:, 1:])
    return q + laplace_value


def e_step(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
           u: np.ndarray, params: RegimeParams, tau: float,
           graph: RegionGraph) -> tuple[FilterState, float]:
    """Forward filter plus the expected complete-data log-likelihood at (params, u)."""
    emis = emission_logpmf(deaths, b_hat, covs, params)
    logP = transition_log_matrices(covs, params, u)
    fs = forward_filter(deaths, b_hat, covs, u, params, tables=(emis, logP))
    lap = laplace_terms(fs.joint, params, u, tau, covs, graph)
    return fs, assemble_q(fs, emis, logP, params.rho, lap)


def m_step_alpha(marginal: np.ndarray, deaths: np.ndarray, b_hat: np.ndarray,
                 covs: CovariateSet, state: int, params: RegimeParams,
                 tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Weighted Poisson update of the shock-state coefficients for one state.

    Observation weights are the filtered probabilities of `state`; counts and
    baseline offsets aggregate over the age groups sharing each coefficient
    block. Returns the updated (n_groups, k) array.
    """
    w = marginal[..., state]
    z = covs.z1 if state == 1 else covs.z2
    alpha = params.alpha(state).copy()
    if alpha.shape[1] == 0:
        return alpha
    if w.sum() == 0.0:
        warnings.warn(f"state {state} receives zero filtered mass; "
                      "its coefficients are left unchanged", stacklevel=2)
        return alpha
    for g in range(covs.n_groups):
        members = np.flatnonzero(covs.group_of == g)
        d_sum = deaths[:, members, :].sum(axis=1)
        b_sum = b_hat[:, members, :].sum(axis=1)
        a = alpha[g]

        def value(av):
            linv = z @ av
            return float((w * (d_sum * linv - b_sum * np.exp(linv))).sum())

        for _ in range(max_iter):
            lin = z @ a
            mu = b_sum * np.exp(lin)
            grad = np.einsum("rt,rtk->k", w * (d_sum - mu), z)
            if np.max(np.abs(grad)) < tol:
                break
            hess = np.einsum("rt,rtk,rtl->kl", w * mu, z, z)
            step = np.linalg.solve(hess, grad)
            # Halve only when the step overshoots (non-finite or a material drop).
            base = value(a)
            scale = 1.0
            for _ in range(40):
                cand = value(a + scale * step)
                if np.isfinite(cand) and cand >= base - 1e-9 * (abs(base) + 1.0):
                    break
                scale *= 0.5
            a = a + scale * step
        else:
            raise ConvergenceError(f"alpha update for state {state} did not converge")
        alpha[g] = a
    return alpha


def _beta_concat(beta: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([beta[label] for label in TRANSITION_LABELS])


def _beta_split(flat: np.ndarray, sizes: dict[str, int]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for label in TRANSITION_LABELS:
        out[label] = flat[pos:pos + sizes[label]].copy()
        pos += sizes[label]
    return out


def beta_objective_grad(beta: dict[str, np.ndarray], joints: np.ndarray,
                        covs: CovariateSet, u: np.ndarray, tau: float,
                        graph: RegionGraph, params: RegimeParams,
                        with_logdet: bool = True):
    """Transition-block objective (to maximize) and its analytic gradient.

    Objective: filtered-joint-weighted log transition probabilities minus half
    the log determinant of the spatial Hessian. The gradient combines the
    multinomial-logit score with the Jacobi-formula derivative of the
    determinant term; cells whose logit sits on the symmetric clamp are
    excluded (the clipped objective is flat there, so the true derivative
    through those cells is zero).
    """
    from .regime import LOGIT_CLAMP

    work = RegimeParams(params.alpha1, params.alpha2, beta, params.rho)
    logP = transition_log_matrices(covs, work, u)
    P = np.exp(logP)
    active = {}
    for label in TRANSITION_LABELS:
        raw = covs.ztr[label] @ beta[label] + u[:, None]
        active[label] = (np.abs(raw) < LOGIT_CLAMP)[:, 1:]
    jt = joints[:, 1:]
    lp = logP[:, 1:]
    val = float(np.where(jt > 0, jt * np.where(jt > 0, lp, 0.0), 0.0).sum())

    row_of = {"01": 0, "02": 0, "11": 1, "22": 2}
    col_of = {"01": 1, "02": 2, "11": 1, "22": 2}
    rowmass = jt.sum(axis=3)                       # (R, T-1, S)
    grads = {}
    for label in TRANSITION_LABELS:
        i, j = row_of[label], col_of[label]
        zt = covs.ztr[label][:, 1:]                # (R, T-1, k)
        pij = P[:, 1:, i, j]
        coeff = (jt[:, :, i, j] - rowmass[:, :, i] * pij) * active[label]
        grads[label] = np.einsum("rt,rtk->k", coeff, zt)

    if with_logdet:
        S_inv = spatial_hessian(joints, work, u, tau, covs, graph)
        sign, logdet = np.linalg.slogdet(S_inv)
        if sign <= 0:
            raise FloatingPointError("spatial Hessian lost positive definiteness")
        val -= 0.5 * logdet
        S_diag = np.diag(np.linalg.inv(S_inv))
        p0 = P[:, 1:, :, 0]                        # (R, T-1, S) rows' stay-at-0 prob
        for label in TRANSITION_LABELS:
            i, j = row_of[label], col_of[label]
            zt = covs.ztr[label][:, 1:]
            coeff = (rowmass[:, :, i] * p0[:, :, i] * (2.0 * p0[:, :, i] - 1.0)
                     * P[:, 1:, i, j] * active[label])
            dlogdet = np.einsum("r,rt,rtk->k", S_diag, coeff, zt)
            grads[label] = grads[label] - 0.5 * dlogdet
    return val, grads


def _beta_logit_hessian(flat: np.ndarray, joints: np.ndarray, covs: CovariateSet,
                        u: np.ndarray, sizes: dict[str, int],
                        params: RegimeParams) -> np.ndarray:
    """Negative Hessian of the weighted multinomial-logit part (the dominant
    curvature); blocks couple within a source row, rows are independent."""
    from .regime import LOGIT_CLAMP

    beta = _beta_split(flat, sizes)
    work = RegimeParams(params.alpha1, params.alpha2, beta, params.rho)
    logP = transition_log_matrices(covs, work, u)
    P = np.exp(logP[:, 1:])
    active = {}
    for label in TRANSITION_LABELS:
        raw = covs.ztr[label] @ beta[label] + u[:, None]
        active[label] = (np.abs(raw) < LOGIT_CLAMP)[:, 1:]
    rowmass = joints[:, 1:].sum(axis=3)
    offsets = {}
    pos = 0
    for label in TRANSITION_LABELS:
        offsets[label] = pos
        pos += sizes[label]
    H = np.zeros((pos, pos))
    row_of = {"01": 0, "02": 0, "11": 1, "22": 2}
    col_of = {"01": 1, "02": 2, "11": 1, "22": 2}
    for la in TRANSITION_LABELS:
        for lb in TRANSITION_LABELS:
            i = row_of[la]
            if row_of[lb] != i:
                continue
            ja, jb = col_of[la], col_of[lb]
            za = covs.ztr[la][:, 1:]
            zb = covs.ztr[lb][:, 1:]
            w = (rowmass[:, :, i] * P[:, :, i, ja] * ((ja == jb) - P[:, :, i, jb])
                 * active[la] * active[lb])
            block = np.einsum("rt,rtk,rtl->kl", w, za, zb)
            sa = slice(offsets[la], offsets[la] + sizes[la])
            sb = slice(offsets[lb], offsets[lb] + sizes[lb])
            H[sa, sb] = block
    return H


def m_step_beta(joints: np.ndarray, covs: CovariateSet, u: np.ndarray, tau: float,
                graph: RegionGraph, params: RegimeParams,
                tol: float = 1e-6, max_iter: int = 500) -> dict[str, np.ndarray]:
    """Quasi-Newton update of all transition-logit blocks, polished with
    Newton steps until the analytic gradient meets the stationarity tolerance."""
    sizes = {label: len(params.beta[label]) for label in TRANSITION_LABELS}
    x0 = _beta_concat(params.beta)
    bound = 30.0

    def negative(flat):
        beta = _beta_split(flat, sizes)
        val, grads = beta_objective_grad(beta, joints, covs, u, tau, graph, params)
        return -val, -_beta_concat(grads)

    def snap(flat):
        out = flat.copy()
        out[out > bound - 1e-6] = bound
        out[out < -bound + 1e-6] = -bound
        return out

    def projected(flat, g):
        proj = g.copy()
        proj[(flat >= bound - 1e-6) & (g < 0)] = 0.0
        proj[(flat <= -bound + 1e-6) & (g > 0)] = 0.0
        return proj

    def fd_hessian(flat):
        n = flat.size
        H = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            h = 1e-6 * max(1.0, abs(flat[i]))
            e[i] = h
            H[:, i] = (negative(flat + e)[1] - negative(flat - e)[1]) / (2.0 * h)
        return 0.5 * (H + H.T)

    res = optimize.minimize(negative, x0, jac=True, method="L-BFGS-B",
                            bounds=[(-bound, bound)] * x0.size,
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-9})
    flat = snap(res.x)
    fval, g = negative(flat)
    iters = res.nit
    for polish in range(40):
        gnorm = np.max(np.abs(projected(flat, g)))
        if gnorm < tol:
            break
        # Newton polish; near the optimum the objective moves below float
        # resolution, so steps are accepted on a gradient-norm decrease too.
        candidates = []
        H_logit = _beta_logit_hessian(flat, joints, covs, u, sizes, params)
        try:
            candidates.append((np.linalg.solve(H_logit, -g), 1.0))
        except np.linalg.LinAlgError:
            pass
        try:
            candidates.append((np.linalg.solve(fd_hessian(flat), -g), 1.0))
        except np.linalg.LinAlgError:
            pass
        # A wide-scale gradient ray handles separation-flat directions, where
        # the optimum runs along a near-zero-curvature valley into the clamp.
        candidates.append((-g / max(np.max(np.abs(g)), 1e-300), 2.0 ** 15))
        best = None
        for step, scale in candidates:
            for _ in range(60):
                trial = snap(np.clip(flat + scale * step, -bound, bound))
                tval, tg = negative(trial)
                tnorm = np.max(np.abs(projected(trial, tg)))
                better_val = tval < fval - 1e-9 * (abs(fval) + 1.0)
                if tnorm < gnorm or better_val:
                    if best is None or tnorm < best[3]:
                        best = (trial, tval, tg, tnorm)
                    break
                scale *= 0.5
        if best is None:
            break
        flat, fval, g, _ = best
        iters += 1
    proj = projected(flat, g)
    if np.max(np.abs(proj)) >= tol:
        raise ConvergenceError(
            f"transition-block update stalled: projected gradient max-norm "
            f"{np.max(np.abs(proj)):.3e} after {iters} iterations")
    return _beta_split(flat, sizes)


def m_step_rho(marginal: np.ndarray) -> np.ndarray:
    """Closed-form initial-state probabilities: region average of week-1 filters."""
    return marginal[:, 0, :].mean(axis=0)


def update_spatial_mode(params: RegimeParams, tau: float, joints: np.ndarray,
                        covs: CovariateSet, graph: RegionGraph,
                        u_init: np.ndarray, tol: float = 1e-8,
                        max_iter: int = 100) -> np.ndarray:
    """Newton ascent of the expected log joint density in the spatial effect.

    Steps are solved in the sum-to-zero subspace (the prior precision
    annihilates constants) and u is re-centered after every step.
    """
    R = graph.R
    Q = tau * graph.laplacian
    u = u_init - u_init.mean()
    ones = np.ones(R) / np.sqrt(R)
    basis = np.linalg.qr(np.eye(R) - np.outer(ones, ones))[0][:, :R - 1]
    for _ in range(max_iter):
        logP = transition_log_matrices(covs, params, u)
        p0 = np.exp(logP[:, 1:, :, 0])
        jt = joints[:, 1:]
        rowmass = jt.sum(axis=3)
        grad = np.einsum("rti,rti->r", rowmass, p0) - jt[..., 0].sum(axis=(1, 2)) - Q @ u
        S_inv = spatial_hessian(joints, params, u, tau, covs, graph)
        reduced = basis.T @ S_inv @ basis
        step = basis @ np.linalg.solve(reduced, basis.T @ grad)
        u = u + step
        u = u - u.mean()
        if np.max(np.abs(step)) < tol:
            return u
    raise ConvergenceError("spatial-mode Newton update did not converge")


@dataclass
class EmTrace:
    """Per-iteration EM diagnostics.

    `objective` is the filter-accumulated incomplete-data log-likelihood, the
    quantity EM theory guarantees to ascend; `q_values` additionally records
    the expected complete-data log-likelihood at each E-step. With filtered
    (not smoothed) state probabilities the latter overshoots its fixed point
    and decays from above, so convergence and divergence checks run on
    `objective`.
    """

    objective: list[float] = field(default_factory=list)
    q_values: list[float] = field(default_factory=list)
    params: list[RegimeParams] = field(default_factory=list)
    u_norms: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


@dataclass
class EmFit:
    params: RegimeParams
    u: np.ndarray
    filter_state: FilterState
    trace: EmTrace
    tau: float
    converged: bool
    n_iter: int


def fit_em(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
           graph: RegionGraph, tau: float, init: RegimeParams,
           epsilon: float = 1e-6, max_iter: int = 200) -> EmFit:
    """Alternate E-step, three-block M-step, and spatial-mode update.

    Stops when the incomplete-data log-likelihood moves by less than
    `epsilon` between consecutive E-steps; two drops beyond 1e-6 abort with
    the trace attached (see EmTrace for why the filtered-weight expected
    complete-data log-likelihood is not used for these checks).
    """
    params = init.copy()
    u = np.zeros(graph.R)
    trace = EmTrace()
    prev = None
    in_decrease = False
    oscillations = 0
    started = time.perf_counter()
    n_states = len(params.rho)

    for it in range(max_iter + 1):
        fs, q = e_step(deaths, b_hat, covs, u, params, tau, graph)
        obj = fs.loglik
        trace.objective.append(obj)
        trace.q_values.append(q)
        trace.params.append(params.copy())
        trace.u_norms.append(float(np.max(np.abs(u))))
        trace.seconds.append(time.perf_counter() - started)
        if prev is not None:
            # A decrease phase resolved by a later material increase is one
            # oscillation; a monotone decaying tail (convergence from above,
            # normal for filtered weights) never completes a cycle.
            if obj < prev - 1e-6:
                in_decrease = True
            elif in_decrease and obj > prev + 1e-6:
                in_decrease = False
                oscillations += 1
                if oscillations >= 2:
                    raise EmDivergenceError(
                        "EM objective is oscillating (two decrease/increase "
                        f"cycles beyond 1e-6; last value {obj:.6f})", trace=trace)
            if abs(obj - prev) < epsilon:
                return EmFit(params, u, fs, trace, tau, True, it)
        prev = obj

        if n_states > 1:
            alpha1 = m_step_alpha(fs.marginal, deaths, b_hat, covs, 1, params)
            alpha2 = m_step_alpha(fs.marginal, deaths, b_hat, covs, 2, params)
            beta = m_step_beta(fs.joint, covs, u, tau, graph, params)
            rho = m_step_rho(fs.marginal)
            params = RegimeParams(alpha1, alpha2, beta, rho)
            u = update_spatial_mode(params, tau, fs.joint, covs, graph, u)
        else:
            params = RegimeParams(params.alpha1, params.alpha2, {}, np.array([1.0]))
    warnings.warn(f"EM did not reach epsilon={epsilon} within {max_iter} iterations",
                  stacklevel=2)
    return EmFit(params, u, fs, trace, tau, False, max_iter)


def incomplete_loglik(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
                      params: RegimeParams, u: np.ndarray, tau: float,
                      graph: RegionGraph, with_laplace: bool = True) -> float:
    """Marginal log-likelihood of the counts: filter normalizers plus, when
    requested, the ICAR density at u and the Laplace correction."""
    fs = forward_filter(deaths, b_hat, covs, u, params)
    total = fs.loglik
    if with_laplace:
        total += laplace_terms(fs.joint, params, u, tau, covs, graph)
    return total


@dataclass
class ProfileResult:
    tau_star: float
    fits: dict[float, EmFit]
    logliks: dict[float, float]


DEFAULT_TAU_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)


def save_regime_fit(path, fit: EmFit, spec, profile_logliks: dict | None = None,
                    extra: dict | None = None) -> None:
    """Self-describing calibration artifact: parameters, spatial mode, trace."""
    import hashlib
    import json

    spec_dict = spec.to_dict()
    spec_hash = hashlib.sha256(json.dumps(spec_dict, sort_keys=True).encode()).hexdigest()
    payload = {
        "schema_version": 1,
        "spec": spec_dict,
        "spec_hash": spec_hash,
        "tau": fit.tau,
        "alpha1": fit.params.alpha1.tolist(),
        "alpha2": fit.params.alpha2.tolist(),
        "beta": {k: v.tolist() for k, v in fit.params.beta.items()},
        "rho": fit.params.rho.tolist(),
        "u": fit.u.tolist(),
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "trace_q": fit.trace.q_values,
        "profile_logliks": {str(k): v for k, v in (profile_logliks or {}).items()},
    }
    payload.update(extra or {})
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_regime_fit(path):
    """Returns (params, u, tau, spec, payload)."""
    import json

    from .regime import RegimeParams, RegimeSpec

    with open(path) as fh:
        payload = json.load(fh)
    params = RegimeParams(
        alpha1=np.asarray(payload["alpha1"], float),
        alpha2=np.asarray(payload["alpha2"], float),
        beta={k: np.asarray(v, float) for k, v in payload["beta"].items()},
        rho=np.asarray(payload["rho"], float))
    spec = RegimeSpec.from_dict(payload["spec"])
    return params, np.asarray(payload["u"], float), float(payload["tau"]), spec, payload


def profile_tau(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
                graph: RegionGraph, grid=DEFAULT_TAU_GRID, init: RegimeParams = None,
                epsilon: float = 1e-6, max_iter: int = 200,
                threads: int = 1) -> ProfileResult:
    """Refit the model for every candidate precision and pick the profile-
    likelihood maximizer; exact ties go to the smaller (less informative) tau."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("tau grid must be non-empty")

    def run(tau):
        fit = fit_em(deaths, b_hat, covs, graph, tau, init, epsilon, max_iter)
        ll = fit.filter_state.loglik + laplace_terms(
            fit.filter_state.joint, fit.params, fit.u, tau, covs, graph)
        return tau, fit, ll

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, grid))
    else:
        results = [run(tau) for tau in grid]
    fits = {tau: fit for tau, fit, _ in results}
    logliks = {tau: ll for tau, _, ll in results}
    best = max(grid, key=lambda tau: (logliks[tau], -tau))
    return ProfileResult(best, fits, logliks)
