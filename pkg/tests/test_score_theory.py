import math

import numpy as np
import pytest

from dsm_langevin.diagnostics import loglog_slope
from dsm_langevin.errors import InvalidN, StabilityViolation
from dsm_langevin.matrixkit import vec
from dsm_langevin.score_theory import (
    TAU_N_CONVENTIONS,
    blocks_to_cov,
    clt_empirical_moments,
    cz_matrix,
    isserlis_quartic,
    isserlis_sigma_eps_oracle,
    mmse_denoiser_identity,
    noise_matrix_sigma_eps,
    optimal_score,
    sgd_exact_second_moment,
    sgd_full_moments,
    sgd_optim_moments,
    sgd_stationary_exact,
    sigma_eps_four_terms,
)
from dsm_langevin.verification import random_spd


def test_optimal_score_examples():
    s = optimal_score(np.eye(2), 1.0)
    np.testing.assert_allclose(s.A, np.eye(2) / 2)
    np.testing.assert_array_equal(s.b, 0.0)
    np.testing.assert_allclose(optimal_score(np.diag([1.0, 3.0]), 0.0).A, np.diag([1.0, 1 / 3]))
    C = random_spd(np.random.default_rng(0), 4)
    A = optimal_score(C, 0.8).A
    np.testing.assert_allclose(A @ (C + 0.64 * np.eye(4)), np.eye(4), atol=1e-10)


def test_denoiser_examples():
    rng = np.random.default_rng(1)
    C = random_spd(rng, 3)
    x = rng.standard_normal(3)
    np.testing.assert_allclose(mmse_denoiser_identity(C, 0.0, x), x)
    np.testing.assert_allclose(mmse_denoiser_identity(np.eye(2), 1.0, [2.0, 0.0]), [1.0, 0.0])
    expected = C @ np.linalg.solve(C + 0.49 * np.eye(3), x)
    np.testing.assert_allclose(mmse_denoiser_identity(C, 0.7, x), expected, atol=1e-12)


def test_noise_matrix_examples():
    np.testing.assert_allclose(noise_matrix_sigma_eps([[1.0]], 1.0, None, 0, 0), 0.5 * np.diag([2.0, 1.0]))
    np.testing.assert_array_equal(noise_matrix_sigma_eps(np.diag([1.0, 2.0]), 1.0, None, 0, 1), 0.0)
    with pytest.raises(ValueError):
        noise_matrix_sigma_eps([[1.0]], 0.0, None, 0, 0)


@pytest.mark.parametrize("mu", [None, [1.0]])
def test_four_term_assembly_matches_closed_form(mu):
    rng = np.random.default_rng(2)
    for d in (1, 2, 3):
        C = random_spd(rng, d)
        m = None if mu is None else rng.standard_normal(d)
        for i in range(d):
            for j in range(d):
                a = noise_matrix_sigma_eps(C, 0.9, m, i, j)
                b = sigma_eps_four_terms(C, 0.9, m, i, j)
                assert np.abs(a - b).max() <= 1e-10 * max(np.abs(b).max(), 1e-300)


@pytest.mark.parametrize("mu", [(0.0,), (1.0,)])
def test_noise_matrix_matches_sampling_oracle_scalar(mu):
    mean, se = isserlis_sigma_eps_oracle([[1.0]], 1.0, np.array(mu), 0, 0, 200_000, seed=5)
    th = noise_matrix_sigma_eps([[1.0]], 1.0, np.array(mu), 0, 0)
    assert np.max(np.abs(mean - th) / se) <= 4.0


def test_noise_matrix_vanishes_for_large_sigma():
    mean, se = isserlis_sigma_eps_oracle([[1.0]], 30.0, None, 0, 0, 100_000, seed=6)
    th = noise_matrix_sigma_eps([[1.0]], 30.0, None, 0, 0)
    assert np.abs(th).max() < 2.0 / 30.0**2
    assert np.max(np.abs(mean - th) / se) <= 4.0


def test_oracle_rejects_small_samples():
    with pytest.raises(ValueError):
        isserlis_sigma_eps_oracle([[1.0]], 1.0, None, 0, 0, 10, seed=0)


def test_isserlis_quartic_examples():
    np.testing.assert_allclose(isserlis_quartic(np.eye(2), np.zeros(2), np.eye(2)), 4 * np.eye(2))
    c, s = 1.3, 0.6
    assert isserlis_quartic([[c]], [0.0], [[s]])[0, 0] == pytest.approx(3 * c**2 * s)


def test_isserlis_quartic_matches_monte_carlo():
    # z = (g, 1) with g ~ N(m, V): second moment C and mean r = (m, 1)
    rng = np.random.default_rng(3)
    V = random_spd(rng, 2)
    m = np.array([0.3, -0.4])
    S = rng.standard_normal((3, 3))
    n = 400_000
    g = m + rng.standard_normal((n, 2)) @ np.linalg.cholesky(V).T
    z = np.concatenate([g, np.ones((n, 1))], axis=1)
    q = np.einsum("ni,ij,nj->n", z, S, z)
    samples = q[:, None, None] * z[:, :, None] * z[:, None, :]
    mean, se = samples.mean(axis=0), samples.std(axis=0, ddof=1) / math.sqrt(n)
    Cz = np.zeros((3, 3))
    Cz[:2, :2] = V + np.outer(m, m)
    Cz[:2, 2] = Cz[2, :2] = m
    Cz[2, 2] = 1.0
    th = isserlis_quartic(Cz, np.append(m, 1.0), S)
    assert np.max(np.abs(mean - th) / se) <= 4.0


def test_optimization_moments_examples():
    mo = sgd_optim_moments([[1.0]], 1.0, None, 0.01)
    assert mo.cov_b[0, 0] == pytest.approx(0.0025)
    assert mo.mean_A[0, 0] == pytest.approx(0.5)
    lam = np.array([1.0, 3.0])
    mo = sgd_optim_moments(np.diag(lam), 1.0, None, 0.01)
    np.testing.assert_allclose(mo.cov_b, np.diag(0.01 / 2 * lam / (lam + 1)), atol=1e-15)
    tiny = sgd_optim_moments(np.diag(lam), 1.0, None, 1e-12)
    assert np.abs(tiny.cov_A).max() < 1e-11
    np.testing.assert_allclose(tiny.mean_A, np.diag(1 / (lam + 1)))


def test_stepsize_bound_enforced():
    with pytest.raises(StabilityViolation, match=r"2/max\(max_k lambda_k \+ sigma\^2, 1\)"):
        sgd_optim_moments([[1.0]], 1.0, None, 1.0)


def test_full_moments_limits_and_scalar_value():
    C = np.diag([1.0, 0.5])
    inf = sgd_full_moments(C, 1.0, 0.01, math.inf)
    opt = sgd_optim_moments(C, 1.0, None, 0.01)
    np.testing.assert_allclose(inf.cov_b, opt.cov_b)
    np.testing.assert_allclose(inf.cov_A, opt.cov_A)
    plus = sgd_full_moments([[1.0]], 1.0, 0.01, 100, "plus")
    minus = sgd_full_moments([[1.0]], 1.0, 0.01, 100, "minus")
    assert plus.cov_b[0, 0] == pytest.approx(0.0025 + 0.000025 + 0.0025)
    assert minus.cov_b[0, 0] == pytest.approx(0.0025 - 0.000025 + 0.0025)
    assert minus.breakdown["tauN"]["cov_b"][0, 0] == pytest.approx(-0.000025)
    assert minus.tau_n_convention == "minus"


def test_full_moments_conventions_and_errors():
    for conv in TAU_N_CONVENTIONS:
        sgd_full_moments(np.diag([1.0, 0.5]), 1.0, 0.01, 50, conv)
    with pytest.raises(ValueError):
        sgd_full_moments([[1.0]], 1.0, 0.01, 50, "bogus")
    with pytest.raises(InvalidN):
        sgd_full_moments([[1.0]], 1.0, 0.01, 1)


def test_generalization_cov_A_is_symmetric_psd():
    mo = sgd_full_moments(np.diag([1.0, 3.0]), 1.0, 0.01, 100)
    V = mo.breakdown["N"]["cov_A"]
    np.testing.assert_allclose(V, V.T, atol=1e-15)
    assert np.linalg.eigvalsh(V).min() >= -1e-15


def test_clt_moments():
    _, V = clt_empirical_moments([[1.0]])
    assert V[0, 0] == pytest.approx(2.0)
    rng = np.random.default_rng(4)
    C = random_spd(rng, 3)
    _, V = clt_empirical_moments(C)
    Z = rng.standard_normal((3, 3))
    np.testing.assert_allclose(V @ vec(Z), vec(C @ (Z + Z.T) @ C), atol=1e-12)
    np.testing.assert_allclose(V, V.T)
    assert np.linalg.eigvalsh(V).min() >= -1e-12
    with pytest.raises(InvalidN):
        clt_empirical_moments(C, N=1)


def test_exact_second_moment_first_order_agreement():
    C = np.diag([1.0, 0.5])
    taus = np.geomspace(1e-4, 1e-2, 6)
    rel = []
    for tau in taus:
        cb, cA = blocks_to_cov(sgd_exact_second_moment(C, 1.0, None, tau))
        mo = sgd_optim_moments(C, 1.0, None, tau)
        rel.append((np.linalg.norm(cb - mo.cov_b) + np.linalg.norm(cA - mo.cov_A)) / tau)
    assert rel[0] < rel[-1]
    assert loglog_slope(taus, rel).slope >= 0.9


def test_exact_second_moment_scalar_denominators():
    tau = 0.05
    blocks = sgd_exact_second_moment([[1.0]], 1.0, None, tau)
    c = np.diag(cz_matrix([[1.0]], 1.0))
    expected = tau * 0.5 * c / (2 * c - tau * c**2)
    np.testing.assert_allclose(np.diag(blocks[0, 0]), expected, rtol=1e-13)


def test_stationary_exact_is_close_to_additive_noise_version():
    C = np.diag([1.0, 0.5])
    a = sgd_stationary_exact(C, 1.0, None, 1e-3)
    b = sgd_exact_second_moment(C, 1.0, None, 1e-3)
    assert np.abs(a - b).max() <= 1e-2 * np.abs(b).max()
