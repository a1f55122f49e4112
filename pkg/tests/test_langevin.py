import math

import numpy as np
import pytest

from dsm_langevin.diagnostics import loglog_slope
from dsm_langevin.errors import DomainError, StabilityViolation
from dsm_langevin.estimation import ChainConfig
from dsm_langevin.gaussian_metrics import GaussianModel, bures_sq, l2_gauss_distance
from dsm_langevin.langevin import (
    PerturbationLaw,
    expected_w2_perturbed,
    kernel_alpha,
    kernel_alpha_l2,
    kernel_beta,
    kernel_beta_l2,
    kernel_matrices,
    kernel_psi,
    kernel_psi_l2,
    mean_term,
    perturbed_distance,
    run_ula_chain,
    sigma_expansion,
    ula_stationary,
)
from dsm_langevin.matrixkit import lyap_inverse_dense
from dsm_langevin.score_theory import LinearScore
from dsm_langevin.verification import perturbation_scan, random_spd

Z = 4.0


def test_scalar_stationary_variance():
    law = ula_stationary(LinearScore([[1.0]], [0.0]), 0.5)
    assert law.cov.entries[0, 0] == pytest.approx(4 / 3)


def test_small_step_limit_is_inverse():
    A = random_spd(np.random.default_rng(0), 3)
    cov = ula_stationary(LinearScore(A, np.zeros(3)), 1e-7).cov.entries
    np.testing.assert_allclose(cov, np.linalg.inv(A), rtol=1e-5)


def test_true_score_gives_inflated_covariance():
    lam = np.array([2.0, 0.7])
    gamma = 0.3
    cov = ula_stationary(LinearScore(np.diag(1 / lam), np.zeros(2)), gamma).cov.entries
    np.testing.assert_allclose(np.diag(cov), lam / (1 - gamma / (2 * lam)), rtol=1e-12)


def test_ula_bound_violation():
    with pytest.raises(StabilityViolation, match="2/lambda_max"):
        ula_stationary(LinearScore([[1.0]], [0.0]), 2.0)
    with pytest.raises(StabilityViolation):
        ula_stationary(LinearScore([[-1.0]], [0.0]), 0.1)


def test_chain_scalar_variance():
    est = run_ula_chain(LinearScore([[1.0]], [0.0]), 0.5, ChainConfig(n_steps=4000, seed=1, replicas=64))
    assert abs(est.cov[0, 0] - 4 / 3) <= Z * est.se_cov[0, 0]


def test_chain_mean():
    est = run_ula_chain(LinearScore(np.eye(2), [1.0, 0.0]), 0.3, ChainConfig(n_steps=4000, seed=2, replicas=32))
    assert np.max(np.abs(est.mean - [1.0, 0.0]) / est.se_mean) <= Z


def test_chain_random_spd_covariance():
    rng = np.random.default_rng(3)
    A = random_spd(rng, 3)
    gamma = 0.5 / np.linalg.eigvalsh(A)[-1]
    est = run_ula_chain(LinearScore(A, np.zeros(3)), gamma, ChainConfig(n_steps=8000, thinning=2, seed=3, replicas=64))
    theory = lyap_inverse_dense(A, gamma, 2 * np.eye(3))
    assert np.max(np.abs(est.cov - theory) / est.se_cov) <= Z


def test_sigma_expansion_examples():
    S0, S1, S2 = sigma_expansion(np.diag([1.0, 0.5]), 0.7, 0.2, np.zeros((2, 2)))
    assert np.all(S1 == 0) and np.all(S2 == 0)
    S0, S1, S2 = sigma_expansion([[1.0]], 0.0, 0.0, [[0.6]])
    assert (S0[0, 0], S1[0, 0], S2[0, 0]) == pytest.approx((1.0, -0.6, 0.36))


def test_sigma_expansion_is_second_order_accurate():
    rng = np.random.default_rng(4)
    C = random_spd(rng, 3)
    Delta = rng.standard_normal((3, 3))
    S0, S1, S2 = sigma_expansion(C, 0.8, 0.3, Delta)
    A = np.linalg.inv(C + 0.64 * np.eye(3))
    eps = np.geomspace(1e-3, 1e-1, 8)
    rem = [np.linalg.norm(ula_stationary(LinearScore(A + e * Delta, np.zeros(3)), 0.3).cov.entries
                          - (S0 + e * S1 + e * e * S2)) for e in eps]
    assert loglog_slope(eps, rem).slope >= 2.7


def test_psi_examples():
    for lam in (0.3, 1.0, 4.0):
        assert kernel_psi(lam, lam, 0.0) == pytest.approx(0.0, abs=1e-15)
        assert kernel_psi_l2(lam, lam, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert kernel_psi(1.0, 2.0, 0.0) == pytest.approx((1 - math.sqrt(2)) ** 2)
    assert kernel_psi(1.0, 2.0, 0.0) == pytest.approx(bures_sq([[1.0]], [[2.0]]))


def test_psi_l2_matches_direct_frobenius_gap():
    lam, sigma, gamma = 0.8, 0.6, 0.1
    ls = lam + sigma**2
    S0 = ula_stationary(LinearScore([[1 / ls]], [0.0]), gamma).cov.entries[0, 0]
    assert kernel_psi_l2(lam, ls, gamma) == pytest.approx((lam - S0) ** 2, rel=1e-12)


def test_kernel_domain_errors():
    with pytest.raises(DomainError):
        kernel_alpha(1.0, 1.0, 1.5, 1.5, 1.5)
    with pytest.raises(DomainError):
        kernel_beta_l2(1.0, 1.0, 1.5, 1.5, -0.1)


@pytest.mark.parametrize("flavor", ["wasserstein", "l2"])
def test_kernels_match_unit_basis_eps_scan(flavor):
    # exact score, one basis direction: alpha is the eps^2 coefficient of the distance
    C = np.eye(2)
    sigma, gamma = 0.0, 0.0
    alpha = {"wasserstein": kernel_alpha, "l2": kernel_alpha_l2}[flavor](1.0, 1.0, 1.0, 1.0, 0.0)
    beta = {"wasserstein": kernel_beta, "l2": kernel_beta_l2}[flavor](1.0, 1.0, 1.0, 1.0, 0.0)
    E01 = np.array([[0.0, 1.0], [0.0, 0.0]])
    E00 = np.array([[1.0, 0.0], [0.0, 0.0]])
    for D, coef in ((E01, alpha), (E00, alpha + beta)):
        eps = 1e-3
        val = perturbed_distance(C, sigma, gamma, np.zeros(2), D, eps, flavor)
        assert val / eps**2 == pytest.approx(coef, rel=1e-2)


def test_expected_distance_trivial_cases():
    C = np.diag([1.0, 0.5])
    psi, _, _ = kernel_matrices([1.0, 0.5], 0.7, 0.1)
    law = PerturbationLaw.zero(2)
    assert expected_w2_perturbed(C, 0.7, 0.1, law, 0.0) == pytest.approx(psi.sum())
    assert expected_w2_perturbed(C, 0.7, 0.1, law, 0.3) == pytest.approx(psi.sum())


def test_mean_term_examples():
    assert mean_term([[1.0]], 1.0, np.zeros((1, 1))) == 0.0
    assert mean_term([[1.0]], 1.0, [[3.0]]) == pytest.approx(12.0)
    rng = np.random.default_rng(5)
    C, V = random_spd(rng, 3), random_spd(rng, 3)
    Cs = C + 0.25 * np.eye(3)
    assert mean_term(C, 0.5, V) == pytest.approx(np.trace(Cs @ Cs @ V), rel=1e-12)


def test_perturbation_law_validation():
    with pytest.raises(ValueError):
        PerturbationLaw(np.eye(2), -np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PerturbationLaw(np.eye(2), np.ones((2, 2)), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_perturbation_law_sampling_moments():
    rng = np.random.default_rng(6)
    law = PerturbationLaw(np.diag([0.5, 0.2]), np.array([[1.0, 0.6], [0.3, 0.8]]),
                          np.array([[1.0, -0.2], [-0.2, 0.8]]))
    U = np.linalg.qr(rng.standard_normal((2, 2)))[0]
    delta, Delta = law.sample(rng, 200_000, U)
    T = np.einsum("ai,nab,bj->nij", U, Delta, U)
    np.testing.assert_allclose((T**2).mean(axis=0), law.m2, atol=0.02)
    np.testing.assert_allclose((T * T.transpose(0, 2, 1)).mean(axis=0), law.m2x, atol=0.02)
    np.testing.assert_allclose(np.cov(delta.T), law.cov_delta, atol=0.01)


def test_l2_distance_helper_consistency():
    p = GaussianModel.create([0.0], [[1.0]])
    q = GaussianModel.create([1.0], [[3.0]])
    assert l2_gauss_distance(p, q) == pytest.approx(5.0)


@pytest.mark.parametrize("flavor", ["wasserstein", "l2"])
def test_expected_distance_against_nested_monte_carlo(flavor):
    rows, slope = perturbation_scan(seed=21, n_draws=600, flavor=flavor)
    assert slope >= 2.5
    for r in rows:
        assert abs(r["mc"] - r["formula"]) <= Z * r["mc_se"]
