"""Closed forms for the optimal affine score and for the stationary moments
of constant-step SGD on the denoising score-matching loss.

Parameter layout: the score is v(x) = -A x + b. SGD acts on d blocks
theta_i = (-A[i, :], b_i) in R^(d+1), one per output coordinate, each a
least-squares regression of y_i = -w_i / sigma on z = (x + sigma w, 1).
Covariances of A are reported for the column-major ``vec(A)``; in that
layout the leading SGD term is ``kron(I, P)`` with P = C_sigma^-1 C_data.

Indices ``i, j`` are 0-based throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidN, StabilityViolation
from .matrixkit import SpdMatrix, as_spd, commutation_matrix, lyap_inverse_spd, unvec, vec

# coefficient c of the cross term c * tau / (N sigma^2) * P^2
TAU_N_COEFFICIENTS = {"plus": 1.0, "minus": -1.0, "half": 0.5}
TAU_N_CONVENTIONS = (*TAU_N_COEFFICIENTS, "derived")


@dataclass(frozen=True)
class LinearScore:
    """Affine score x -> -A x + b."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape != (b.size, b.size):
            raise ValueError(f"A has shape {A.shape}, b has length {b.size}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("score parameters must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self):
        return self.b.size

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return -x @ self.A.T + self.b


@dataclass(frozen=True)
class SgdMoments:
    """Stationary moments of the SGD iterates (A, b).

    ``breakdown`` maps a term name (``"tau"``, ``"tauN"``, ``"N"``) to a
    dict with signed contributions ``cov_b`` and ``cov_A``; the totals are
    their sums.
    """

    mean_A: np.ndarray
    mean_b: np.ndarray
    cov_b: np.ndarray
    cov_A: np.ndarray
    breakdown: dict = field(default_factory=dict)
    tau_n_convention: str | None = None


def _check_sigma(sigma, strict):
    if sigma < 0 or (strict and sigma == 0):
        cmp = "> 0" if strict else ">= 0"
        raise ValueError(f"sigma must be {cmp}, got {sigma}")


def smoothed_cov(C_data, sigma):
    """C_sigma = C_data + sigma^2 I as an SpdMatrix sharing the data eigenbasis."""
    C = as_spd(C_data)
    return SpdMatrix.from_eig(C.eigvals + sigma**2, C.eigvecs)


def optimal_score(C_data, sigma):
    _check_sigma(sigma, strict=False)
    C = as_spd(C_data)
    return LinearScore(smoothed_cov(C, sigma).inv(), np.zeros(C.dim))


def mmse_denoiser_identity(C_data, sigma, x):
    """Tweedie denoiser x + sigma^2 v*(x) for zero-mean Gaussian data."""
    score = optimal_score(C_data, sigma)
    x = np.asarray(x, dtype=float)
    return x + sigma**2 * score(x)


def shrinkage(C_data, sigma):
    """P = C_sigma^-1 C_data (symmetric; shares the data eigenbasis)."""
    C = as_spd(C_data)
    lam = C.eigvals
    return (C.eigvecs * (lam / (lam + sigma**2))) @ C.eigvecs.T


def cz_matrix(C_data, sigma, mu=None):
    """Second moment of z = (x + sigma w, 1) for x ~ N(mu, C_data)."""
    C = as_spd(C_data)
    d = C.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    Cz = np.empty((d + 1, d + 1))
    Cz[:d, :d] = C.entries + sigma**2 * np.eye(d) + np.outer(mu, mu)
    Cz[:d, d] = mu
    Cz[d, :d] = mu
    Cz[d, d] = 1.0
    return Cz


def optimal_theta(C_data, sigma, mu=None):
    """Optimal blocks theta*_i = C_z^-1 nu_i, stacked as rows of a d x (d+1) array."""
    C = as_spd(C_data)
    d = C.dim
    Cz = cz_matrix(C, sigma, mu)
    nu = -np.eye(d + 1)[:d]
    return np.linalg.solve(Cz, nu.T).T


def sgd_stepsize_bound(C_data, sigma, mu=None):
    """2 / lambda_max(C_z); equals 2/max(max_k lambda_k + sigma^2, 1) when mu = 0."""
    if mu is None or not np.any(mu):
        lam_max = as_spd(C_data).eigvals[0]
        return 2.0 / max(lam_max + sigma**2, 1.0)
    return 2.0 / np.linalg.eigvalsh(cz_matrix(C_data, sigma, mu))[-1]


def _check_tau(C_data, sigma, mu, tau):
    bound = sgd_stepsize_bound(C_data, sigma, mu)
    if not 0 <= tau < bound:
        raise StabilityViolation(
            f"tau={tau} violates the SGD stability bound 2/max(max_k lambda_k + sigma^2, 1) = {bound:.6g}"
        )


def noise_matrix_sigma_eps(C_data, sigma, mu, i, j):
    """Gradient-noise covariance (1/sigma^2) P_ij C_z at the optimum."""
    _check_sigma(sigma, strict=True)
    P = shrinkage(C_data, sigma)
    return P[i, j] / sigma**2 * cz_matrix(C_data, sigma, mu)


def isserlis_quartic(C, r, S):
    """E[z z^T S z z^T] for Gaussian z with second moment C and mean r."""
    C = np.asarray(C, dtype=float)
    r = np.asarray(r, dtype=float)
    S = np.asarray(S, dtype=float)
    R = np.outer(r, r)
    return C @ S @ C + C @ S.T @ C + np.sum(C * S) * C - 2.0 * np.sum(R * S) * R


def isserlis_cubic_y(Cz, nu_i, theta):
    """E[y_i (theta^T z) z z^T] for y_i jointly Gaussian, zero mean, with E[y_i z] = nu_i."""
    v = Cz @ theta
    return (theta @ nu_i) * Cz + np.outer(nu_i, v) + np.outer(v, nu_i)


def sigma_eps_four_terms(C_data, sigma, mu, i, j):
    """Noise matrix assembled term by term from the fourth-moment expansion."""
    _check_sigma(sigma, strict=True)
    C = as_spd(C_data)
    d = C.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    Cz = cz_matrix(C, sigma, mu)
    r = np.append(mu, 1.0)
    nu = -np.eye(d + 1)[:d]
    theta = np.linalg.solve(Cz, nu.T).T
    term1 = (i == j) / sigma**2 * Cz + np.outer(nu[i], nu[j]) + np.outer(nu[j], nu[i])
    term2 = isserlis_quartic(Cz, r, np.outer(theta[i], theta[j]))
    term3 = isserlis_cubic_y(Cz, nu[i], theta[j])
    term4 = isserlis_cubic_y(Cz, nu[j], theta[i])
    return term1 + term2 - term3 - term4


def isserlis_sigma_eps_oracle(C_data, sigma, mu, i, j, n_samples, seed, chunk=200_000):
    """Monte Carlo mean and standard errors of eps_i eps_j^T at theta*.

    eps_i = (z^T theta*_i - y_i) z with z = (x + sigma w, 1), y = -w / sigma.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    C = as_spd(C_data)
    d = C.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    theta = optimal_theta(C, sigma, mu)
    L = C.sqrt()
    rng = np.random.default_rng(seed)
    s1 = np.zeros((d + 1, d + 1))
    s2 = np.zeros((d + 1, d + 1))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x = mu + rng.standard_normal((m, d)) @ L
        w = rng.standard_normal((m, d))
        z = np.concatenate([x + sigma * w, np.ones((m, 1))], axis=1)
        y = -w / sigma
        ri = z @ theta[i] - y[:, i]
        rj = z @ theta[j] - y[:, j]
        outer = (ri * rj)[:, None, None] * z[:, :, None] * z[:, None, :]
        s1 += outer.sum(axis=0)
        s2 += (outer**2).sum(axis=0)
        done += m
    mean = s1 / n_samples
    var = (s2 / n_samples - mean**2) * n_samples / (n_samples - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / n_samples)


def _tau_n_matrix(C, sigma, N, tau, convention):
    """Signed tau/N contribution to Cov(b) (a d x d matrix)."""
    P = shrinkage(C, sigma)
    if convention == "derived":
        lam = C.eigvals
        ls = lam + sigma**2
        diag = lam / ls**2 + lam**2 / ls**3 + np.sum(lam / ls) * lam / ls**2
        return -(tau / (2.0 * N)) * (C.eigvecs * diag) @ C.eigvecs.T
    return TAU_N_COEFFICIENTS[convention] * tau / (N * sigma**2) * (P @ P)


def sgd_optim_moments(C_data, sigma, mu, tau):
    """Leading-order stationary moments with exact data (N = infinity)."""
    _check_sigma(sigma, strict=True)
    C = as_spd(C_data)
    d = C.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    _check_tau(C, sigma, mu, tau)
    Cs = smoothed_cov(C, sigma)
    P = shrinkage(C, sigma)
    cov_b = tau / (2.0 * sigma**2) * P
    cov_A = np.kron(np.eye(d), cov_b)
    return SgdMoments(
        mean_A=Cs.inv(),
        mean_b=np.linalg.solve(Cs.entries, mu),
        cov_b=cov_b,
        cov_A=cov_A,
        breakdown={"tau": {"cov_b": cov_b, "cov_A": cov_A}},
    )


def sgd_full_moments(C_data, sigma, tau, N, tau_n_term="minus"):
    """Stationary moments with the optimization (tau), cross (tau/N) and
    generalization (1/N) terms for SGD on an empirical Gaussian of size N.

    ``tau_n_term`` selects the cross-term coefficient: ``"minus"``
    (-tau/(N sigma^2) P^2), ``"plus"`` (+tau/(N sigma^2) P^2),
    ``"half"`` (+tau/(2 N sigma^2) P^2) or ``"derived"`` (second-order
    expansion of E[P(C_N)] including the 1/N bias of the empirical covariance).
    """
    if tau_n_term not in TAU_N_CONVENTIONS:
        raise ValueError(f"unknown tau_n_term {tau_n_term!r}; expected one of {TAU_N_CONVENTIONS}")
    if not (N == math.inf or N >= 2):
        raise InvalidN(f"N must be >= 2 or infinite, got {N}")
    base = sgd_optim_moments(C_data, sigma, None, tau)
    C = as_spd(C_data)
    d = C.dim
    terms = dict(base.breakdown)
    if N == math.inf:
        zero_b, zero_A = np.zeros((d, d)), np.zeros((d * d, d * d))
        terms["tauN"] = {"cov_b": zero_b, "cov_A": zero_A}
        terms["N"] = {"cov_b": zero_b, "cov_A": zero_A}
    else:
        tn = _tau_n_matrix(C, sigma, N, tau, tau_n_term)
        terms["tauN"] = {"cov_b": tn, "cov_A": np.kron(np.eye(d), tn)}
        cov_b_N, V_A = generalization_terms(C, sigma)
        terms["N"] = {"cov_b": cov_b_N / N, "cov_A": V_A / N}
    cov_b = sum(t["cov_b"] for t in terms.values())
    cov_A = sum(t["cov_A"] for t in terms.values())
    return SgdMoments(base.mean_A, base.mean_b, cov_b, cov_A, terms, tau_n_term)


def generalization_terms(C_data, sigma):
    """Per-1/N covariance of E_SGD[b_N] and of vec(E_SGD[A_N]) across datasets."""
    C = as_spd(C_data)
    lam = C.eigvals
    Q = (C.eigvecs * (lam / (lam + sigma**2) ** 2)) @ C.eigvecs.T
    d = C.dim
    return Q, np.kron(Q, Q) @ (np.eye(d * d) + commutation_matrix(d))


def clt_empirical_moments(C_data, N=None):
    """Covariances of sqrt(N)(mu_N - mu) and of sqrt(N) vec(C_N - C_data)."""
    if N is not None and N < 2:
        raise InvalidN(f"N must be >= 2, got {N}")
    C = as_spd(C_data).entries
    d = C.shape[0]
    return C.copy(), np.kron(C, C) @ (np.eye(d * d) + commutation_matrix(d))


def sgd_exact_second_moment(C_data, sigma, mu, tau):
    """Blocks Sigma^{ij} = tau (L^tau_{C_z})^-1 [Sigma_eps^{ij}], shape (d, d, d+1, d+1).

    This is the additive-noise stationary covariance: it keeps all orders in
    tau for the operator but treats the gradient noise as evaluated at theta*.
    """
    _check_sigma(sigma, strict=True)
    C = as_spd(C_data)
    d = C.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    _check_tau(C, sigma, mu, tau)
    Cz = cz_matrix(C, sigma, mu)
    Y = tau * lyap_inverse_spd(Cz, tau, Cz) / sigma**2
    P = shrinkage(C, sigma)
    return P[:, :, None, None] * Y[None, None]


def quartic_operator_matrix(Cz, r):
    """Dense matrix of S -> E[z z^T S z z^T] acting on vec(S)."""
    p = Cz.shape[0]
    Kc = commutation_matrix(p)
    CC = np.kron(Cz, Cz)
    vr = vec(np.outer(r, r))
    return CC + CC @ Kc + np.outer(vec(Cz), vec(Cz)) - 2.0 * np.outer(vr, vr)


def sgd_stationary_exact(C_data, sigma, mu, tau):
    """Exact stationary covariance blocks of the SGD chain (multiplicative noise kept).

    Solves C_z Y + Y C_z - tau E[z z^T Y z z^T] = C_z; then
    Sigma^{ij} = tau P_ij / sigma^2 Y.
    """
    _check_sigma(sigma, strict=True)
    C = as_spd(C_data)
    d = C.dim
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    _check_tau(C, sigma, mu, tau)
    Cz = cz_matrix(C, sigma, mu)
    p = d + 1
    I = np.eye(p)
    K = np.kron(I, Cz) + np.kron(Cz, I) - tau * quartic_operator_matrix(Cz, np.append(mu, 1.0))
    Y = unvec(np.linalg.solve(K, vec(Cz)), p)
    Y = 0.5 * (Y + Y.T)
    if np.linalg.eigvalsh(Y)[0] <= 0:
        raise StabilityViolation(f"tau={tau}: second moments of the SGD chain do not converge")
    P = shrinkage(C, sigma)
    return tau * P[:, :, None, None] * Y[None, None] / sigma**2


def blocks_to_cov(blocks):
    """Extract (cov_b, cov_A) from theta blocks; cov_A is for column-major vec(A)."""
    d = blocks.shape[0]
    cov_b = blocks[:, :, d, d].copy()
    # Cov(A[i,k], A[j,l]) = blocks[i, j, k, l]; vec index of A[i,k] is i + k d
    cov_A = blocks[:, :, :d, :d].transpose(2, 0, 3, 1).reshape(d * d, d * d)
    return cov_b, cov_A
