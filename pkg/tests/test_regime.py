import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mortregime.regime import (DEFAULT_AGE_SHARING, CovariateSet, RegimeParams,
                               RegimeSpec, complete_loglik, default_spec,
                               icar_logdensity, icar_sample, indicator_joints,
                               pack_params, spatial_hessian, spec_from_config,
                               state_mean, transition_log_matrices,
                               transition_matrix, unpack_like)
from oracles import fd_hessian, softmax_transition
from synth import path_graph, random_instance


def test_state_mean_examples():
    assert state_mean(7.0, np.array([1.0]), np.array([])) == pytest.approx(7.0)
    assert state_mean(10.0, np.array([1.0]), np.array([np.log(2.0)])) == pytest.approx(20.0)
    val = state_mean(7.3, np.array([0.5, -1.0]), np.array([0.4, 0.1]))
    assert val == pytest.approx(7.3 * np.exp(0.1))
    assert val == pytest.approx(8.0677, abs=1e-4)


def test_state_mean_multiplicative_and_errors():
    z = np.array([0.3, 0.7])
    a = np.array([1.1, -0.4])
    assert state_mean(3.0 * 5.0, z, a) == pytest.approx(3.0 * state_mean(5.0, z, a))
    with pytest.raises(ValueError):
        state_mean(0.0, z, a)
    with pytest.raises(FloatingPointError):
        state_mean(1.0, np.array([np.inf]), np.array([1.0]))


def unit_beta(vals=None):
    base = {"01": np.zeros(2), "02": np.zeros(2), "11": np.zeros(2), "22": np.zeros(2)}
    if vals:
        base.update(vals)
    return base


def test_transition_matrix_zero_logits():
    P = transition_matrix({}, {k: np.zeros(1) for k in ("01", "02", "11", "22")}, 0.0)
    assert np.allclose(P[0], [1 / 3, 1 / 3, 1 / 3])
    assert np.allclose(P[1], [0.5, 0.5, 0.0])
    assert np.allclose(P[2], [0.5, 0.0, 0.5])


def test_transition_matrix_saturation_clamped():
    beta = {k: np.zeros(1) for k in ("01", "02", "11", "22")}
    beta["11"] = np.array([1e9])  # clamped to +30
    P = transition_matrix({}, beta, 0.0)
    assert P[1, 1] == pytest.approx(1.0, abs=1e-12)
    assert P[1, 0] == pytest.approx(0.0, abs=1e-12)


def test_transition_matrix_row0_hand_softmax():
    beta = {"01": np.array([np.log(2.0)]), "02": np.array([0.0]),
            "11": np.zeros(1), "22": np.zeros(1)}
    P = transition_matrix({}, beta, 0.0)
    assert np.allclose(P[0], [0.25, 0.5, 0.25])


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_transition_rows_stochastic_random(seed):
    rng = np.random.default_rng(seed)
    beta = {k: rng.normal(0, 3, rng.integers(1, 4)) for k in ("01", "02", "11", "22")}
    z = {k: rng.normal(0, 2, len(beta[k]) - 1) for k in beta}
    u = rng.normal(0, 1)
    P = transition_matrix(z, beta, u)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert P[1, 2] == 0.0 and P[2, 1] == 0.0
    assert np.all((P >= 0.0) & (P <= 1.0))
    ref = softmax_transition({k: np.clip(z[k], -1e9, 1e9) for k in z},
                             beta, u)
    assert np.allclose(P, ref, atol=1e-10)


def test_vectorized_transitions_match_scalar_op():
    inst = random_instance(np.random.default_rng(2), R=2, T=5, X=1)
    covs, params = inst["covs"], inst["params"]
    logP = transition_log_matrices(covs, params, inst["u"])
    for r in (0, 1):
        for t in (0, 4):
            z = {label: covs.ztr[label][r, t, 1:] for label in covs.ztr}
            ref = transition_matrix(z, params.beta, inst["u"][r])
            assert np.allclose(np.exp(logP[r, t]), ref, atol=1e-12)


def test_icar_logdensity_constants_and_quadratic():
    graph = path_graph(3)
    u0 = np.zeros(3)
    base = icar_logdensity(u0, 1.0, graph)
    lam = np.linalg.eigvalsh(graph.laplacian)
    expected = 0.5 * np.sum(np.log(lam[1:])) - np.log(2 * np.pi)
    assert base == pytest.approx(expected)

    # Doubling tau moves the density by (R-1)/2 * log 2 at u = 0.
    assert icar_logdensity(u0, 2.0, graph) - base == pytest.approx(np.log(2.0))

    u = np.array([1.0, 0.0, -1.0])
    assert u @ graph.laplacian @ u == pytest.approx(2.0)
    assert icar_logdensity(u, 1.0, graph) - base == pytest.approx(-1.0)


def test_icar_requires_sum_zero_and_connected():
    graph = path_graph(3)
    with pytest.raises(ValueError, match="sum to zero"):
        icar_logdensity(np.array([1.0, 1.0, 1.0]), 1.0, graph)
    from mortregime.panel import RegionGraph
    disconnected = RegionGraph(("a", "b", "c"),
                               np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], dtype=np.int8))
    with pytest.raises(ValueError, match="disconnected"):
        icar_logdensity(np.zeros(3), 1.0, disconnected)


def test_icar_sample_moments():
    graph = path_graph(4)
    tau = 2.5
    rng = np.random.default_rng(0)
    draws = icar_sample(tau, graph, rng, size=50000)
    assert np.abs(draws.sum(axis=1)).max() < 1e-12
    ref = np.linalg.pinv(tau * graph.laplacian)
    sd = np.sqrt(np.diag(ref))
    mean_tol = 4.0 * sd / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws[:10000].mean(axis=0)) < 4 * sd / 100)
    emp = np.cov(draws.T)
    assert np.abs(emp - ref).max() / np.abs(ref).max() < 0.05

    tiny = icar_sample(1e12, graph, rng, size=100)
    assert np.abs(tiny).max() < 1e-4


def test_complete_loglik_baseline_path():
    inst = random_instance(np.random.default_rng(9), R=2, T=4, X=2)
    states = np.zeros((2, 4), dtype=int)
    val = complete_loglik(inst["deaths"], inst["b_hat"], inst["covs"], states,
                          inst["u"], inst["params"], 1.0, inst["graph"])
    pois = stats.poisson.logpmf(inst["deaths"], inst["b_hat"]).sum()
    logP = transition_log_matrices(inst["covs"], inst["params"], inst["u"])
    trans = logP[:, 1:, 0, 0].sum()
    rho0 = 2 * np.log(inst["params"].rho[0])
    assert val == pytest.approx(pois + trans + rho0, rel=1e-12)


def test_complete_loglik_hand_summed_two_weeks():
    """R=1, T=2 toy assembled term by term with scipy pmfs."""
    inst = random_instance(np.random.default_rng(41), R=1, T=2, X=1)
    states = np.array([[0, 1]])
    covs, params = inst["covs"], inst["params"]
    val = complete_loglik(inst["deaths"], inst["b_hat"], covs, states,
                          inst["u"], params, 1.0, inst["graph"])
    mu0 = inst["b_hat"][0, 0, 0]
    mu1 = inst["b_hat"][0, 0, 1] * np.exp(covs.z1[0, 1] @ params.alpha1[0])
    by_hand = (stats.poisson.logpmf(inst["deaths"][0, 0, 0], mu0)
               + stats.poisson.logpmf(inst["deaths"][0, 0, 1], mu1)
               + np.log(params.rho[0]))
    z = {label: covs.ztr[label][0, 1, 1:] for label in covs.ztr}
    by_hand += np.log(transition_matrix(z, params.beta, inst["u"][0])[0, 1])
    assert val == pytest.approx(by_hand, rel=1e-12)


def test_complete_loglik_zero_coefficient_invariance():
    inst = random_instance(np.random.default_rng(12), R=2, T=3, X=1)
    states = np.zeros((2, 3), dtype=int)
    base = complete_loglik(inst["deaths"], inst["b_hat"], inst["covs"], states,
                           inst["u"], inst["params"], 1.0, inst["graph"])
    # Append a covariate with zero coefficient to state 1.
    covs2 = CovariateSet(
        z1=np.concatenate([inst["covs"].z1, np.ones_like(inst["covs"].z1)], axis=2),
        z2=inst["covs"].z2, ztr=inst["covs"].ztr,
        group_of=inst["covs"].group_of, n_groups=inst["covs"].n_groups)
    params2 = RegimeParams(np.hstack([inst["params"].alpha1, np.zeros((1, 1))]),
                           inst["params"].alpha2, inst["params"].beta,
                           inst["params"].rho)
    val = complete_loglik(inst["deaths"], inst["b_hat"], covs2, states,
                          inst["u"], params2, 1.0, inst["graph"])
    assert val == pytest.approx(base, rel=1e-14)


def test_complete_loglik_rejects_forbidden_path():
    inst = random_instance(np.random.default_rng(3), R=1, T=3, X=1)
    states = np.array([[0, 1, 2]])
    with pytest.raises(ValueError, match="forbidden"):
        complete_loglik(inst["deaths"], inst["b_hat"], inst["covs"], states,
                        inst["u"], inst["params"], 1.0, inst["graph"])


def test_spatial_hessian_no_transitions_equals_prior_precision():
    inst = random_instance(np.random.default_rng(6), R=3, T=1, X=1)
    joints = np.zeros((3, 1, 3, 3))
    S_inv = spatial_hessian(joints, inst["params"], inst["u"], 2.0, inst["covs"],
                            inst["graph"])
    assert np.allclose(S_inv, 2.0 * inst["graph"].laplacian)


def test_spatial_hessian_matches_finite_differences():
    from mortregime.em import e_step

    inst = random_instance(np.random.default_rng(7), R=3, T=6, X=2)
    tau = 2.0
    fs, _ = e_step(inst["deaths"], inst["b_hat"], inst["covs"], inst["u"],
                   inst["params"], tau, inst["graph"])

    def expected_log_joint(u):
        logP = transition_log_matrices(inst["covs"], inst["params"], u)
        jt = fs.joint[:, 1:]
        val = np.where(jt > 0, jt * np.where(jt > 0, logP[:, 1:], 0.0), 0.0).sum()
        return val - 0.5 * tau * u @ inst["graph"].laplacian @ u

    H_fd = -fd_hessian(expected_log_joint, inst["u"], h=1e-5)
    S_inv = spatial_hessian(fs.joint, inst["params"], inst["u"], tau, inst["covs"],
                            inst["graph"])
    assert np.max(np.abs(H_fd - S_inv)) / np.max(np.abs(S_inv)) < 1e-5


def test_spatial_hessian_saturated_rows_add_nothing():
    inst = random_instance(np.random.default_rng(8), R=2, T=5, X=1)
    params = inst["params"].copy()
    for label in params.beta:
        params.beta[label][:] = 0.0
        params.beta[label][0] = 1e9  # clamped saturation: p_i0 ~ 0 or 1
    states = np.zeros((2, 5), dtype=int)
    joints = indicator_joints(states, 3)
    S_inv = spatial_hessian(joints, params, inst["u"], 3.0, inst["covs"], inst["graph"])
    assert np.allclose(S_inv, 3.0 * inst["graph"].laplacian, atol=1e-10)


def test_pack_unpack_roundtrip():
    inst = random_instance(np.random.default_rng(10), R=2, T=3, X=2)
    flat = pack_params(inst["params"])
    back = unpack_like(inst["params"], flat)
    assert np.allclose(pack_params(back), flat)
    assert np.allclose(back.rho, inst["params"].rho)
    with pytest.raises(ValueError):
        unpack_like(inst["params"], flat[:-1])


def test_default_spec_matches_case_study():
    spec = default_spec()
    assert spec.state1 == ("TA", "TA_lag1", "TA_lag2", "HI", "HI_lag1", "HI_lag2")
    assert spec.state2 == ("IA_avg01_hinge75", "IA_avg23_hinge75", "CI_avg01",
                           "CI_avg23", "HA_avg01_hinge75", "HA_avg23_hinge75")
    assert spec.trans["01"] == ("HI",)
    assert spec.trans["02"] == ("IA_avg01_hinge75", "HA_avg01_hinge75")
    assert spec.trans["11"] == ("HI", "HI_lag1", "HI_lag2")
    assert spec.trans["22"] == ("IA_avg01_hinge75", "IA_avg23_hinge75",
                                "HA_avg01_hinge75", "HA_avg23_hinge75")
    assert spec.age_sharing == DEFAULT_AGE_SHARING
    assert spec.reduced_groups == ("65-74", "75-84", "85+")
    assert spec.group_index(("65-69", "70-74", "75-79", "80-84", "85-89", "90+")).tolist() \
        == [0, 0, 1, 1, 2, 2]


def test_spec_config_parsing():
    text = """
[state1]
covariates = a, b
[state2]
covariates = c
[trans01]
covariates = a
[trans02]
covariates = c
[trans11]
covariates =
[trans22]
covariates = c
[age_sharing]
young = all
old = all
"""
    spec = spec_from_config(io.StringIO(text))
    assert spec.state1 == ("a", "b") and spec.trans["11"] == ()
    assert spec.age_sharing == {"young": "all", "old": "all"}
    assert spec.all_columns() == ("a", "b", "c")

    with pytest.raises(ValueError, match="missing section"):
        spec_from_config(io.StringIO("[state1]\ncovariates = a\n"))


def test_spec_dict_roundtrip():
    spec = default_spec()
    assert RegimeSpec.from_dict(spec.to_dict()) == spec
