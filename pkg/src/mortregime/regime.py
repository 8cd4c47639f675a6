"""Three-state regime-switching kernel for weekly death counts.

State 0 keeps the seasonal baseline mean, state 1 (environmental) and state 2
(respiratory) amplify it multiplicatively through covariate effects shared
across paired age groups. Transitions follow covariate-driven multinomial
logits with a region-level random effect under an intrinsic CAR prior; direct
moves between the two shock states are structurally impossible.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.special import gammaln, logsumexp

from .panel import RegionGraph

TRANSITION_LABELS = ("01", "02", "11", "22")
FORBIDDEN = ((1, 2), (2, 1))
LOGIT_CLAMP = 30.0  # e^-30 ~ 1e-13: saturation without overflow

DEFAULT_AGE_SHARING = {
    "65-69": "65-74", "70-74": "65-74",
    "75-79": "75-84", "80-84": "75-84",
    "85-89": "85+", "90+": "85+",
}


@dataclass(frozen=True)
class RegimeSpec:
    """Covariate lists per shock state and transition, plus age-group sharing."""

    state1: tuple[str, ...]
    state2: tuple[str, ...]
    trans: dict[str, tuple[str, ...]]
    age_sharing: dict[str, str]
    n_states: int = 3

    def __post_init__(self):
        if self.n_states not in (1, 3):
            raise ValueError("n_states must be 3 (full model) or 1 (degenerate baseline)")
        if self.n_states == 3 and set(self.trans) != set(TRANSITION_LABELS):
            raise ValueError(f"transition covariates must cover labels {TRANSITION_LABELS}")

    @property
    def reduced_groups(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for age in self.age_sharing:
            seen.setdefault(self.age_sharing[age], None)
        return tuple(seen)

    def group_index(self, age_groups: tuple[str, ...]) -> np.ndarray:
        """Map each panel age group to its reduced (parameter-sharing) group."""
        groups = self.reduced_groups
        pos = {g: i for i, g in enumerate(groups)}
        idx = []
        for age in age_groups:
            if age not in self.age_sharing:
                raise ValueError(f"age group {age!r} missing from the sharing map")
            idx.append(pos[self.age_sharing[age]])
        return np.asarray(idx, dtype=np.int64)

    def state_covariates(self, state: int) -> tuple[str, ...]:
        return {1: self.state1, 2: self.state2}[state]

    def all_columns(self) -> tuple[str, ...]:
        cols: dict[str, None] = {}
        for name in self.state1 + self.state2:
            cols.setdefault(name, None)
        for label in self.trans:
            for name in self.trans[label]:
                cols.setdefault(name, None)
        return tuple(cols)

    def to_dict(self) -> dict:
        return {"state1": list(self.state1), "state2": list(self.state2),
                "trans": {k: list(v) for k, v in self.trans.items()},
                "age_sharing": dict(self.age_sharing), "n_states": self.n_states}

    @classmethod
    def from_dict(cls, payload: dict) -> "RegimeSpec":
        return cls(state1=tuple(payload["state1"]), state2=tuple(payload["state2"]),
                   trans={k: tuple(v) for k, v in payload["trans"].items()},
                   age_sharing=dict(payload["age_sharing"]),
                   n_states=int(payload.get("n_states", 3)))


def default_spec(age_sharing: dict[str, str] | None = None) -> RegimeSpec:
    """The case-study model: heat covariates in state 1, respiratory in state 2."""
    text = resources.files("mortregime").joinpath("default_spec.ini").read_text()
    return spec_from_config(io.StringIO(text), age_sharing=age_sharing)


def spec_from_config(source, age_sharing: dict[str, str] | None = None) -> RegimeSpec:
    """Parse a key-value spec file with [state1], [state2], [transNN] sections."""
    cfg = configparser.ConfigParser()
    cfg.optionxform = str  # age-group labels are case/format sensitive
    if hasattr(source, "read"):
        cfg.read_file(source)
    else:
        with open(source) as fh:
            cfg.read_file(fh)

    def cov_list(section):
        if not cfg.has_section(section):
            raise ValueError(f"spec file is missing section [{section}]")
        raw = cfg.get(section, "covariates", fallback="")
        return tuple(s.strip() for s in raw.split(",") if s.strip())

    trans = {label: cov_list(f"trans{label}") for label in TRANSITION_LABELS}
    if age_sharing is None:
        if cfg.has_section("age_sharing"):
            age_sharing = dict(cfg.items("age_sharing"))
        else:
            age_sharing = dict(DEFAULT_AGE_SHARING)
    return RegimeSpec(state1=cov_list("state1"), state2=cov_list("state2"),
                      trans=trans, age_sharing=age_sharing)


@dataclass
class RegimeParams:
    """Parameter containers for the regime process; immutable by convention."""

    alpha1: np.ndarray                 # (n_groups, k1)
    alpha2: np.ndarray                 # (n_groups, k2)
    beta: dict[str, np.ndarray]        # label -> (1 + k_label,), intercept first
    rho: np.ndarray                    # (n_states,), initial-state probabilities

    def __post_init__(self):
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-9:
            raise ValueError("rho must be a probability vector")

    def alpha(self, state: int) -> np.ndarray:
        return {1: self.alpha1, 2: self.alpha2}[state]

    def copy(self) -> "RegimeParams":
        return RegimeParams(self.alpha1.copy(), self.alpha2.copy(),
                            {k: v.copy() for k, v in self.beta.items()}, self.rho.copy())


def initial_params(spec: RegimeSpec, n_groups: int | None = None) -> RegimeParams:
    """Starting point near the baseline-dominant regime: rare, persistent shocks."""
    G = len(spec.reduced_groups) if n_groups is None else n_groups
    if spec.n_states == 1:
        return RegimeParams(np.zeros((G, 0)), np.zeros((G, 0)), {}, np.array([1.0]))
    beta = {}
    for label in TRANSITION_LABELS:
        b = np.zeros(1 + len(spec.trans[label]))
        b[0] = -3.0 if label in ("01", "02") else 1.0
        beta[label] = b
    return RegimeParams(
        alpha1=np.zeros((G, len(spec.state1))),
        alpha2=np.zeros((G, len(spec.state2))),
        beta=beta,
        rho=np.array([0.98, 0.01, 0.01]),
    )


def param_layout(spec: RegimeSpec) -> tuple[tuple[str, int], ...]:
    """Stable block order of the flattened parameter vector (rho excluded)."""
    blocks = []
    for g in spec.reduced_groups:
        blocks.append((f"alpha1[{g}]", len(spec.state1)))
    for g in spec.reduced_groups:
        blocks.append((f"alpha2[{g}]", len(spec.state2)))
    for label in TRANSITION_LABELS:
        blocks.append((f"beta{label}", 1 + len(spec.trans[label])))
    return tuple(blocks)


def pack_params(params: RegimeParams) -> np.ndarray:
    parts = [params.alpha1.ravel(), params.alpha2.ravel()]
    parts += [params.beta[label] for label in TRANSITION_LABELS if label in params.beta]
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack_like(template: RegimeParams, flat: np.ndarray) -> RegimeParams:
    """Rebuild a parameter container from a flat vector, copying rho from the template."""
    G, k1 = template.alpha1.shape
    _, k2 = template.alpha2.shape
    pos = 0
    a1 = flat[pos:pos + G * k1].reshape(G, k1).copy()
    pos += G * k1
    a2 = flat[pos:pos + G * k2].reshape(G, k2).copy()
    pos += G * k2
    beta = {}
    for label in TRANSITION_LABELS:
        if label not in template.beta:
            continue
        n = len(template.beta[label])
        beta[label] = flat[pos:pos + n].copy()
        pos += n
    if pos != flat.size:
        raise ValueError("flat vector length does not match the parameter layout")
    return RegimeParams(a1, a2, beta, template.rho.copy())


def unpack_params(spec: RegimeSpec, flat: np.ndarray, rho: np.ndarray,
                  n_groups: int) -> RegimeParams:
    k1, k2 = len(spec.state1), len(spec.state2)
    pos = 0
    alpha1 = flat[pos:pos + n_groups * k1].reshape(n_groups, k1)
    pos += n_groups * k1
    alpha2 = flat[pos:pos + n_groups * k2].reshape(n_groups, k2)
    pos += n_groups * k2
    beta = {}
    for label in TRANSITION_LABELS:
        size = 1 + len(spec.trans[label])
        beta[label] = flat[pos:pos + size].copy()
        pos += size
    if pos != flat.size:
        raise ValueError("flat parameter vector does not match the spec layout")
    return RegimeParams(alpha1.copy(), alpha2.copy(), beta, rho.copy())


@dataclass
class CovariateSet:
    """Covariate stacks aligned to the panel: per-state and per-transition."""

    z1: np.ndarray                   # (R, T, k1)
    z2: np.ndarray                   # (R, T, k2)
    ztr: dict[str, np.ndarray]       # label -> (R, T, 1 + k), intercept column first
    group_of: np.ndarray             # (X,) reduced-group index per age group
    n_groups: int

    @classmethod
    def build(cls, frame, spec: RegimeSpec, age_groups: tuple[str, ...],
              fill_unavailable: float = 0.0) -> "CovariateSet":
        R, T = len(frame.regions), frame.weeks.T
        z1 = frame.matrix(spec.state1, fill_unavailable) if spec.state1 else np.zeros((R, T, 0))
        z2 = frame.matrix(spec.state2, fill_unavailable) if spec.state2 else np.zeros((R, T, 0))
        ztr = {}
        ones = np.ones((R, T, 1))
        for label, names in spec.trans.items():
            z = frame.matrix(names, fill_unavailable) if names else np.zeros((R, T, 0))
            ztr[label] = np.concatenate([ones, z], axis=2)
        return cls(z1, z2, ztr, spec.group_index(age_groups), len(spec.reduced_groups))

    @property
    def shape(self) -> tuple[int, int]:
        return self.z1.shape[:2]


def state_mean(b_hat: float, z: np.ndarray, alpha: np.ndarray) -> float:
    """Poisson mean b_hat * exp(z' alpha); alpha empty or zero gives the baseline."""
    if b_hat <= 0:
        raise ValueError("baseline mean must be positive")
    expo = float(np.dot(z, alpha)) if len(alpha) else 0.0
    if not np.isfinite(expo):
        raise FloatingPointError(f"non-finite state-mean exponent from z={z}, alpha={alpha}")
    return b_hat * np.exp(expo)


def mean_exponents(covs: CovariateSet, params: RegimeParams) -> np.ndarray:
    """log(state mean / baseline) per (R, n_groups, T, state); state 0 column is 0."""
    R, T = covs.shape
    S = len(params.rho)
    out = np.zeros((R, covs.n_groups, T, S))
    if S > 1:
        out[..., 1] = np.einsum("rtk,gk->rgt", covs.z1, params.alpha1)
        out[..., 2] = np.einsum("rtk,gk->rgt", covs.z2, params.alpha2)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite state-mean exponent; check covariate scaling")
    return out


def emission_logpmf(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
                    params: RegimeParams) -> np.ndarray:
    """(R, T, S) log of the product over age groups of state-conditional Poisson pmfs."""
    eta = mean_exponents(covs, params)[:, covs.group_of, :, :]     # (R, X, T, S)
    log_b = np.log(b_hat)
    d = deaths[..., None]
    log_mu = log_b[..., None] + eta
    terms = d * log_mu - np.exp(log_mu) - gammaln(deaths + 1.0)[..., None]
    return terms.sum(axis=1)


def transition_log_matrices(covs: CovariateSet, params: RegimeParams,
                            u: np.ndarray) -> np.ndarray:
    """(R, T, S, S) log transition matrices; forbidden moves are -inf."""
    R, T = covs.shape
    S = len(params.rho)
    if S == 1:
        return np.zeros((R, T, 1, 1))
    eta = {}
    for label in TRANSITION_LABELS:
        raw = covs.ztr[label] @ params.beta[label] + u[:, None]
        eta[label] = np.clip(raw, -LOGIT_CLAMP, LOGIT_CLAMP)
    out = np.full((R, T, 3, 3), -np.inf)
    # Row 0 softmax with unit baseline term over {stay, ->1, ->2}.
    stack0 = np.stack([np.zeros((R, T)), eta["01"], eta["02"]], axis=-1)
    lse0 = logsumexp(stack0, axis=-1)
    out[..., 0, 0] = -lse0
    out[..., 0, 1] = eta["01"] - lse0
    out[..., 0, 2] = eta["02"] - lse0
    lse1 = np.logaddexp(0.0, eta["11"])
    out[..., 1, 0] = -lse1
    out[..., 1, 1] = eta["11"] - lse1
    lse2 = np.logaddexp(0.0, eta["22"])
    out[..., 2, 0] = -lse2
    out[..., 2, 2] = eta["22"] - lse2
    return out


def transition_matrix(z: dict[str, np.ndarray], beta: dict[str, np.ndarray],
                      u: float) -> np.ndarray:
    """Single 3x3 row-stochastic matrix from per-transition covariate rows.

    `z[label]` excludes the intercept; `beta[label]` includes it first.
    """
    eta = {}
    for label in TRANSITION_LABELS:
        zrow = np.asarray(z.get(label, np.zeros(len(beta[label]) - 1)), float)
        eta[label] = float(np.clip(beta[label][0] + zrow @ beta[label][1:] + u,
                                   -LOGIT_CLAMP, LOGIT_CLAMP))
    P = np.zeros((3, 3))
    denom0 = 1.0 + np.exp(eta["01"]) + np.exp(eta["02"])
    P[0] = [1.0 / denom0, np.exp(eta["01"]) / denom0, np.exp(eta["02"]) / denom0]
    denom1 = 1.0 + np.exp(eta["11"])
    P[1] = [1.0 / denom1, np.exp(eta["11"]) / denom1, 0.0]
    denom2 = 1.0 + np.exp(eta["22"])
    P[2] = [1.0 / denom2, 0.0, np.exp(eta["22"]) / denom2]
    return P


def _laplacian_spectrum(graph: RegionGraph) -> tuple[np.ndarray, np.ndarray]:
    lam, vec = np.linalg.eigh(graph.laplacian)
    zero = np.sum(np.abs(lam) < 1e-9 * max(lam.max(), 1.0))
    if zero != 1:
        raise ValueError(
            "adjacency graph is disconnected (Laplacian rank below R-1); "
            "supply a connected adjacency file")
    return lam, vec


def icar_logdensity(u: np.ndarray, tau: float, graph: RegionGraph) -> float:
    """Log density of the intrinsic CAR field on the sum-to-zero subspace.

    Uses the pseudo-determinant convention: the R-1 positive Laplacian
    eigenvalues normalize the improper prior.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    R = graph.R
    if abs(u.sum()) > 1e-8 * max(1.0, np.abs(u).max()):
        raise ValueError("spatial effect must sum to zero")
    lam, _ = _laplacian_spectrum(graph)
    quad = float(u @ graph.laplacian @ u)
    return (0.5 * (R - 1) * np.log(tau) + 0.5 * np.sum(np.log(lam[1:]))
            - 0.5 * (R - 1) * np.log(2.0 * np.pi) - 0.5 * tau * quad)


def icar_sample(tau: float, graph: RegionGraph, rng: np.random.Generator,
                size: int | None = None) -> np.ndarray:
    """Draw from the intrinsic CAR field; components sum to zero exactly."""
    lam, vec = _laplacian_spectrum(graph)
    n = 1 if size is None else size
    coords = rng.standard_normal((n, graph.R - 1)) / np.sqrt(tau * lam[1:])
    u = coords @ vec[:, 1:].T
    u -= u.mean(axis=1, keepdims=True)
    return u[0] if size is None else u


def indicator_joints(states: np.ndarray, n_states: int) -> np.ndarray:
    """Point-mass pairwise weights for a given state path, (R, T, S, S)."""
    R, T = states.shape
    joints = np.zeros((R, T, n_states, n_states))
    r = np.repeat(np.arange(R), T - 1)
    t = np.tile(np.arange(1, T), R)
    joints[r, t, states[:, :-1].ravel(), states[:, 1:].ravel()] = 1.0
    return joints


def spatial_hessian(joints: np.ndarray, params: RegimeParams, u: np.ndarray,
                    tau: float, covs: CovariateSet, graph: RegionGraph) -> np.ndarray:
    """Negative Hessian of the expected log joint density in u: Q(tau) + diagonal.

    The diagonal accumulates p_i0 (1 - p_i0) over transitions weighted by the
    filtered joint probabilities; `joints[:, 0]` is ignored (no transition
    into the first week).
    """
    S_inv = tau * graph.laplacian
    if joints.shape[1] >= 2:
        logP = transition_log_matrices(covs, params, u)
        p_i0 = np.exp(logP[..., 0])                       # (R, T, S)
        curvature = p_i0 * (1.0 - p_i0)
        diag = np.einsum("rtij,rti->r", joints[:, 1:], curvature[:, 1:])
        S_inv = S_inv + np.diag(diag)
    return S_inv


def laplace_terms(joints: np.ndarray, params: RegimeParams, u: np.ndarray,
                  tau: float, covs: CovariateSet, graph: RegionGraph) -> float:
    """ICAR log density at u plus the Laplace-approximation correction."""
    R = graph.R
    S_inv = spatial_hessian(joints, params, u, tau, covs, graph)
    sign, logdet = np.linalg.slogdet(S_inv)
    if sign <= 0:
        raise FloatingPointError("spatial Hessian is not positive definite")
    return (icar_logdensity(u, tau, graph)
            + 0.5 * (R - 1) * np.log(2.0 * np.pi) - 0.5 * logdet)


def validate_states(states: np.ndarray) -> None:
    pairs = set(zip(states[:, :-1].ravel().tolist(), states[:, 1:].ravel().tolist()))
    for bad in FORBIDDEN:
        if bad in pairs:
            raise ValueError(f"state path contains the forbidden transition {bad[0]}->{bad[1]}")


def complete_loglik(deaths: np.ndarray, b_hat: np.ndarray, covs: CovariateSet,
                    states: np.ndarray, u: np.ndarray, params: RegimeParams,
                    tau: float, graph: RegionGraph,
                    with_laplace_terms: bool = False) -> float:
    """Log joint probability of deaths and a given state path.

    Sums state-conditional Poisson log-pmfs, the initial-state log
    probability, and transition log probabilities; with `with_laplace_terms`
    adds the ICAR density at u and the Laplace correction evaluated with
    point-mass weights on the path.
    """
    validate_states(states)
    R, T = states.shape
    emis = emission_logpmf(deaths, b_hat, covs, params)
    ridx = np.arange(R)[:, None]
    tidx = np.arange(T)[None, :]
    total = float(emis[ridx, tidx, states].sum())
    total += float(np.log(params.rho[states[:, 0]]).sum())
    if T >= 2:
        logP = transition_log_matrices(covs, params, u)
        r2 = np.arange(R)[:, None]
        t2 = np.arange(1, T)[None, :]
        total += float(logP[r2, t2, states[:, :-1], states[:, 1:]].sum())
    if with_laplace_terms:
        joints = indicator_joints(states, len(params.rho))
        total += laplace_terms(joints, params, u, tau, covs, graph)
    return total
