"""Monte Carlo simulation of constant-step SGD on the denoising loss.

Each step draws x from the training law (the true Gaussian or an empirical
Gaussian N(mu_N, C_N) built from N samples), a noise vector w, and moves
(A, b) along the gradient of the half loss 0.5 * |-A(x + sigma w) + b + w/sigma|^2.
Replicas run in lockstep as one vectorized chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import loglog_slope
from .errors import InvalidN, StabilityViolation
from .estimation import (
    DIVERGENCE_NORM,
    ChainConfig,
    MomentAccumulator,
    MomentEstimate,
    NoiseStream,
)
from .matrixkit import as_spd, vec
from .score_theory import blocks_to_cov, sgd_stationary_exact, sgd_stepsize_bound, shrinkage
from .seeding import replica_rng, task_rng

__all__ = [
    "ChainConfig",
    "MomentEstimate",
    "ExactData",
    "EmpiricalData",
    "sgd_gradient",
    "empirical_gaussian",
    "default_burn_in",
    "run_sgd_chain",
    "sgd_snapshots",
    "split_theta",
    "generalization_sweep",
    "GeneralizationTable",
    "total_covariance_oracle",
]


@dataclass(frozen=True)
class ExactData:
    """Train on the true data law."""


@dataclass(frozen=True)
class EmpiricalData:
    """Train on N(mu_N, C_N) from N draws (1/N normalization).

    With ``per_replica`` every replica gets its own dataset, so pooled
    moments average over datasets and SGD noise together.
    """

    N: int
    seed: int = 0
    per_replica: bool = False

    def __post_init__(self):
        if self.N < 2:
            raise InvalidN(f"N must be >= 2, got {self.N}")


def sgd_gradient(score, x, w, sigma):
    """Gradient of |v(x + sigma w) + w/sigma|^2 in (A, b) for v(y) = -A y + b.

    Returns ``(grad_A, grad_b)`` for a single sample.
    """
    xt = np.asarray(x, dtype=float) + sigma * np.asarray(w, dtype=float)
    r = -score.A @ xt + score.b + np.asarray(w, dtype=float) / sigma
    return -2.0 * np.outer(r, xt), 2.0 * r


def empirical_gaussian(samples):
    """(mu_N, C_N) with the 1/N covariance normalization."""
    X = np.asarray(samples, dtype=float)
    mu = X.mean(axis=0)
    Y = X - mu
    return mu, Y.T @ Y / X.shape[0]


def default_burn_in(C_data, sigma, tau):
    lam_min = as_spd(C_data).eigvals[-1]
    return math.ceil(10.0 / (tau * min(lam_min + sigma**2, 1.0)))


def split_theta(v, d):
    """Split an observation vector (vec(A), b) into A and b."""
    v = np.asarray(v)
    return v[: d * d].reshape(d, d, order="F"), v[d * d:]


def _datasets(C, mu, source, R, path):
    """Per-replica (mu_N, chol-like factor of C_N) arrays and the realized moments."""
    d = C.dim
    L = C.sqrt()
    if source.per_replica:
        mus, covs = [], []
        for r in range(R):
            g = replica_rng(source.seed, path + "/dataset", r)
            m, c = empirical_gaussian(mu + g.standard_normal((source.N, d)) @ L)
            mus.append(m)
            covs.append(c)
        mus, covs = np.array(mus), np.array(covs)
    else:
        g = task_rng(source.seed, path + "/dataset")
        m, c = empirical_gaussian(mu + g.standard_normal((source.N, d)) @ L)
        mus, covs = np.broadcast_to(m, (R, d)), np.broadcast_to(c, (R, d, d))
    w, U = np.linalg.eigh(covs)
    factors = U * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
    return mus, factors, covs


def _prepare(C_data, sigma, tau, data_source, R, mu, path):
    C = as_spd(C_data)
    d = C.dim
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    bound = sgd_stepsize_bound(C, sigma, mu)
    if not 0 < tau < bound:
        raise StabilityViolation(
            f"tau={tau} violates the SGD stability bound 2/max(max_k lambda_k + sigma^2, 1) = {bound:.6g}"
        )
    if data_source == "exact":
        data_source = ExactData()
    if isinstance(data_source, EmpiricalData):
        mus, factors, covs = _datasets(C, mu, data_source, R, path)
        extras = {"mu_N": np.array(mus), "C_N": np.array(covs)}
    else:
        mus = np.broadcast_to(mu, (R, d))
        factors = np.broadcast_to(C.sqrt(), (R, d, d))
        extras = {}
    shared = not getattr(data_source, "per_replica", False)
    return C, mu, mus, factors, shared, extras


def _iterates(C, sigma, tau, mus, factors, shared, R, n_total, seed, path):
    """Yield (k, A, b) after each SGD step; arrays are updated in place."""
    d = C.dim
    A = np.zeros((R, d, d))
    b = np.zeros((R, d))
    F0 = factors[0]
    noise = NoiseStream(seed, path + "/noise", R, 2 * d)
    for k in range(n_total):
        g = noise.next()
        gx, w = g[:, :d], g[:, d:]
        x = mus + (gx @ F0.T if shared else np.einsum("rij,rj->ri", factors, gx))
        xt = x + sigma * w
        r = b + w / sigma - np.einsum("rij,rj->ri", A, xt)
        A += tau * r[:, :, None] * xt[:, None, :]
        b -= tau * r
        if k % 256 == 0 and not (np.abs(A).max() < DIVERGENCE_NORM and np.abs(b).max() < DIVERGENCE_NORM):
            raise StabilityViolation(f"SGD diverged at step {k}: parameter norm exceeds {DIVERGENCE_NORM:g}")
        yield k, A, b


def _theta(A, b):
    R, d = b.shape
    return np.concatenate([A.transpose(0, 2, 1).reshape(R, d * d), b], axis=1)


def run_sgd_chain(C_data, sigma, tau, data_source, cfg, mu=None, path="sgd"):
    """Simulate SGD and estimate the stationary moments of (vec(A), b).

    The observation vector is ``concat(vec(A), b)`` with column-major
    ``vec``; use :func:`split_theta` to unpack ``mean``. Chains start at
    A = 0, b = 0. ``extras`` carries the realized empirical moments.
    """
    R = cfg.replicas
    C, mu, mus, factors, shared, extras = _prepare(C_data, sigma, tau, data_source, R, mu, path)
    d = C.dim
    burn = default_burn_in(C, sigma, tau) if cfg.burn_in is None else cfg.burn_in
    Cs = C.entries + sigma**2 * np.eye(d)
    # centre sums at the population optimum to limit cancellation
    shift = np.concatenate([vec(np.linalg.inv(Cs)), np.linalg.solve(Cs, mu)])
    acc = MomentAccumulator(R, cfg.n_records, d * d + d, shift=shift)
    for k, A, b in _iterates(C, sigma, tau, mus, factors, shared, R, burn + cfg.n_steps, cfg.seed, path):
        j = k - burn
        if j >= 0 and j % cfg.thinning == 0 and acc.k < cfg.n_records:
            acc.add(_theta(A, b))
    return acc.estimate(extras)


def sgd_snapshots(C_data, sigma, tau, data_source, replicas, n_snapshots, every, seed=0,
                  burn_in=None, mu=None, path="sgd"):
    """Iterates (vec(A), b) of each replica taken every ``every`` steps after burn-in.

    Returns an array of shape (replicas, n_snapshots, d*d + d) and the extras dict.
    """
    C, mu, mus, factors, shared, extras = _prepare(C_data, sigma, tau, data_source, replicas, mu, path)
    d = C.dim
    burn = default_burn_in(C, sigma, tau) if burn_in is None else burn_in
    out = np.empty((replicas, n_snapshots, d * d + d))
    n_total = burn + n_snapshots * every
    for k, A, b in _iterates(C, sigma, tau, mus, factors, shared, replicas, n_total, seed, path):
        j = k + 1 - burn
        if j > 0 and j % every == 0:
            out[:, j // every - 1] = _theta(A, b)
    return out, extras


@dataclass(frozen=True)
class GeneralizationTable:
    N: np.ndarray
    cov_b: np.ndarray
    se_cov_b: np.ndarray
    cov_A: np.ndarray
    se_cov_A: np.ndarray
    slope: object
    intercept_coef: float
    intercept_se: float


def generalization_sweep(C_data, sigma, tau, N_list, cfg, path="sweep"):
    """Total covariance of (A, b) over fresh datasets and SGD noise, per N.

    Each replica trains on its own dataset, so the pooled covariance is
    E[Cov_SGD] + Cov[E_SGD] by the law of total covariance. The slope of
    tr(cov_b) minus the optimization term against 1/N is fitted on a log-log
    scale; ``intercept_coef`` is the least-squares coefficient of 1/N.
    """
    C = as_spd(C_data)
    d = C.dim
    opt = np.trace(tau / (2.0 * sigma**2) * shrinkage(C, sigma))
    rows_b, se_b, rows_A, se_A = [], [], [], []
    for N in N_list:
        src = ExactData() if N == math.inf else EmpiricalData(int(N), cfg.seed, per_replica=True)
        est = run_sgd_chain(C, sigma, tau, src, cfg, path=f"{path}/N={N}")
        rows_b.append(est.cov[d * d:, d * d:])
        se_b.append(est.se_cov[d * d:, d * d:])
        rows_A.append(est.cov[: d * d, : d * d])
        se_A.append(est.se_cov[: d * d, : d * d])
    N_arr = np.asarray(N_list, dtype=float)
    finite = np.isfinite(N_arr)
    excess = np.array([np.trace(c) for c in rows_b]) - opt
    ex_se = np.array([np.sqrt(np.sum(np.diag(s) ** 2)) for s in se_b])
    inv = 1.0 / N_arr[finite]
    slope = loglog_slope(inv, excess[finite]) if finite.sum() >= 2 and np.all(excess[finite] > 0) else None
    wts = 1.0 / ex_se[finite] ** 2
    coef = float(np.sum(wts * inv * excess[finite]) / np.sum(wts * inv**2)) if finite.any() else math.nan
    coef_se = float(1.0 / np.sqrt(np.sum(wts * inv**2))) if finite.any() else math.nan
    return GeneralizationTable(
        N_arr, np.array(rows_b), np.array(se_b), np.array(rows_A), np.array(se_A), slope, coef, coef_se
    )


def total_covariance_oracle(C_data, sigma, tau, N, n_datasets, seed=0, path="oracle"):
    """Exact dataset-averaged stationary covariance of (vec(A), b), by sampling datasets.

    For each dataset the SGD stationary mean (C_N + sigma^2 I)^-1 (I, mu_N)
    and covariance (exact, multiplicative noise included) are computed in
    closed form; the law of total covariance combines them. Returns
    (cov, se) over the observation vector (vec(A), b). With N infinite the
    result is exact and se is zero.
    """
    C = as_spd(C_data)
    d = C.dim
    k = d * d

    if N == math.inf:
        cb, cA = blocks_to_cov(sgd_stationary_exact(C, sigma, None, tau))
        out = np.zeros((k + d, k + d))
        out[:k, :k], out[k:, k:] = cA, cb
        return out, np.zeros((k + d, k + d))
    rng = task_rng(seed, path)
    L = C.sqrt()
    within = np.empty((n_datasets, k + d, k + d))
    means = np.empty((n_datasets, k + d))
    for m in range(n_datasets):
        mun, Cn = empirical_gaussian(rng.standard_normal((N, d)) @ L)
        Ainv = np.linalg.inv(Cn + sigma**2 * np.eye(d))
        means[m] = np.concatenate([vec(Ainv), Ainv @ mun])
        blocks = sgd_stationary_exact(Cn, sigma, mun, tau)
        cb, cA = blocks_to_cov(blocks)
        # cross blocks Cov(A[i,k], b_j) = blocks[i, j, k, d]
        cross = blocks[:, :, :d, d].transpose(2, 0, 1).reshape(k, d)
        w = np.zeros((k + d, k + d))
        w[:k, :k], w[k:, k:], w[:k, k:], w[k:, :k] = cA, cb, cross, cross.T
        within[m] = w
    centred = means - means.mean(axis=0)
    per = within + centred[:, :, None] * centred[:, None, :]
    cov = per.mean(axis=0)
    # unbiased between-dataset part
    cov += (centred[:, :, None] * centred[:, None, :]).mean(axis=0) / (n_datasets - 1)
    se = per.std(axis=0, ddof=1) / math.sqrt(n_datasets)
    return 0.5 * (cov + cov.T), se
