import math

import numpy as np
import pytest

from dsm_langevin.errors import InvalidN, StabilityViolation
from dsm_langevin.estimation import ChainConfig
from dsm_langevin.score_theory import (
    LinearScore,
    blocks_to_cov,
    optimal_theta,
    sgd_optim_moments,
    sgd_stationary_exact,
)
from dsm_langevin.sgd_sim import (
    EmpiricalData,
    ExactData,
    empirical_gaussian,
    generalization_sweep,
    run_sgd_chain,
    sgd_gradient,
    sgd_snapshots,
    split_theta,
)

Z = 4.0


def half_loss(A, b, x, w, sigma):
    r = -A @ (x + sigma * w) + b + w / sigma
    return float(r @ r)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    d, sigma, h = 3, 0.8, 1e-6
    A, b = rng.standard_normal((d, d)), rng.standard_normal(d)
    x, w = rng.standard_normal(d), rng.standard_normal(d)
    gA, gb = sgd_gradient(LinearScore(A, b), x, w, sigma)
    fdA = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            E = np.zeros((d, d))
            E[i, j] = h
            fdA[i, j] = (half_loss(A + E, b, x, w, sigma) - half_loss(A - E, b, x, w, sigma)) / (2 * h)
    fdb = np.array([(half_loss(A, b + h * e, x, w, sigma) - half_loss(A, b - h * e, x, w, sigma)) / (2 * h)
                    for e in np.eye(d)])
    assert np.linalg.norm(gA - fdA) / np.linalg.norm(fdA) < 1e-6
    assert np.linalg.norm(gb - fdb) / np.linalg.norm(fdb) < 1e-6


def test_gradient_is_affine_in_parameters():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal(2), rng.standard_normal(2)
    s = [LinearScore(rng.standard_normal((2, 2)), rng.standard_normal(2)) for _ in range(2)]
    mid = LinearScore(0.5 * (s[0].A + s[1].A), 0.5 * (s[0].b + s[1].b))
    g0, g1, gm = (sgd_gradient(v, x, w, 0.5) for v in (*s, mid))
    np.testing.assert_allclose(gm[0], 0.5 * (g0[0] + g1[0]), atol=1e-12)
    np.testing.assert_allclose(gm[1], 0.5 * (g0[1] + g1[1]), atol=1e-12)
    _, gb = sgd_gradient(LinearScore(np.zeros((2, 2)), np.zeros(2)), x, w, 0.5)
    np.testing.assert_allclose(gb, 2 * (w / 0.5))


def test_mean_gradient_vanishes_at_optimum():
    rng = np.random.default_rng(2)
    C = np.diag([1.0, 0.5])
    sigma, n = 0.7, 100_000
    theta = optimal_theta(C, sigma)
    score = LinearScore(-theta[:, :2], theta[:, 2])
    x = rng.standard_normal((n, 2)) * np.sqrt(np.diag(C))
    w = rng.standard_normal((n, 2))
    g = np.array([np.concatenate([ga.ravel(), gb]) for ga, gb in
                  (sgd_gradient(score, x[k], w[k], sigma) for k in range(n))])
    z = g.mean(axis=0) / (g.std(axis=0, ddof=1) / math.sqrt(n))
    assert np.abs(z).max() <= Z


def test_exact_source_scalar_moments():
    cfg = ChainConfig(n_steps=4000, thinning=4, seed=3, replicas=64)
    est = run_sgd_chain([[1.0]], 1.0, 0.01, ExactData(), cfg)
    A, b = split_theta(est.mean, 1)
    assert abs(A[0, 0] - 0.5) <= Z * est.se_mean[0]
    assert abs(b[0]) <= Z * est.se_mean[1]
    assert abs(est.cov[1, 1] - 0.0025) <= Z * est.se_cov[1, 1]
    assert est.n_units == 64


def test_chain_matches_exact_stationary_covariance_d2():
    C = np.diag([1.0, 0.5])
    tau = 0.02
    cfg = ChainConfig(n_steps=10_000, thinning=10, seed=4, replicas=100)
    est = run_sgd_chain(C, 1.0, tau, "exact", cfg)
    cb, cA = blocks_to_cov(sgd_stationary_exact(C, 1.0, None, tau))
    assert np.max(np.abs(est.cov[4:, 4:] - cb) / est.se_cov[4:, 4:]) <= Z
    assert np.max(np.abs(est.cov[:4, :4] - cA) / est.se_cov[:4, :4]) <= Z


def test_empirical_mean_tracks_realized_dataset():
    cfg = ChainConfig(n_steps=4000, thinning=4, seed=5, replicas=32)
    est = run_sgd_chain(np.diag([1.0, 0.5]), 1.0, 0.01, EmpiricalData(50, seed=9), cfg)
    C_N = est.extras["C_N"][0]
    target = np.linalg.inv(C_N + np.eye(2))
    A, _ = split_theta(est.mean, 2)
    se_A, _ = split_theta(est.se_mean, 2)
    assert np.max(np.abs(A - target) / se_A) <= Z


def test_empirical_gaussian_uses_one_over_n():
    X = np.array([[1.0], [3.0]])
    mu, C = empirical_gaussian(X)
    assert mu[0] == 2.0 and C[0, 0] == 1.0


def test_generalization_sweep_one_over_n_law():
    C = [[1.0]]
    cfg = ChainConfig(n_steps=2000, thinning=2, seed=6, replicas=1000)
    table = generalization_sweep(C, 1.0, 0.005, [25, 50, 100, 200], cfg)
    assert 0.8 <= table.slope.slope <= 1.2
    # the 1/N coefficient of Cov(b) is lambda / (lambda + sigma^2)^2
    assert abs(table.intercept_coef - 0.25) <= Z * table.intercept_se + 0.005 / 2


def test_large_n_recovers_optimization_covariance():
    cfg = ChainConfig(n_steps=4000, thinning=4, seed=7, replicas=200)
    est = run_sgd_chain([[1.0]], 1.0, 0.01, EmpiricalData(100_000, seed=7, per_replica=True), cfg)
    opt = sgd_optim_moments([[1.0]], 1.0, None, 0.01).cov_b[0, 0]
    assert abs(est.cov[1, 1] - opt) <= Z * est.se_cov[1, 1]


def test_stability_and_size_errors():
    cfg = ChainConfig(n_steps=1000)
    with pytest.raises(StabilityViolation, match="2/max"):
        run_sgd_chain([[1.0]], 1.0, 1.0, ExactData(), cfg)
    with pytest.raises(InvalidN):
        EmpiricalData(1)
    with pytest.raises(ValueError):
        ChainConfig(n_steps=500)


def test_runs_are_deterministic_and_replica_streams_independent_of_count():
    cfg = ChainConfig(n_steps=1000, seed=8, replicas=3)
    a = run_sgd_chain([[1.0]], 1.0, 0.01, ExactData(), cfg)
    b = run_sgd_chain([[1.0]], 1.0, 0.01, ExactData(), cfg)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.cov, b.cov)
    s3, _ = sgd_snapshots([[1.0]], 1.0, 0.01, ExactData(), 3, 4, 10, seed=8, burn_in=5)
    s5, _ = sgd_snapshots([[1.0]], 1.0, 0.01, ExactData(), 5, 4, 10, seed=8, burn_in=5)
    np.testing.assert_array_equal(s3, s5[:3])
