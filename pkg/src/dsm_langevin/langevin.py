"""Unadjusted Langevin sampling with an affine score.

With v(y) = -A y + b the ULA chain y' = y + gamma v(y) + sqrt(2 gamma) w is
a discretized Ornstein-Uhlenbeck process whose stationary law is
N(A^-1 b, Sigma) with A Sigma + Sigma A^T - gamma A Sigma A^T = 2 I.

The error kernels below give the second-order expansion of the expected
squared distance between N(0, C_data) and the stationary law when the
score is the optimal one perturbed by (eps delta, eps Delta). Kernel
arguments are the data eigenvalue ``lam`` and ``ls = lam + sigma^2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, StabilityViolation
from .estimation import DIVERGENCE_NORM, MomentAccumulator, NoiseStream
from .gaussian_metrics import GaussianModel, l2_gauss_distance, w2_sq_gauss
from .matrixkit import SpdMatrix, as_spd, lyap_inverse_dense, lyap_inverse_spd
from .score_theory import LinearScore

FLAVORS = ("wasserstein", "l2")


@dataclass(frozen=True)
class UlaStationary:
    mean: np.ndarray
    cov: SpdMatrix

    def as_gaussian(self):
        return GaussianModel(self.mean, self.cov)


def _check_ula(A, gamma, allow_zero=False):
    ev = np.linalg.eigvals(A)
    if np.any(ev.real <= 0):
        raise StabilityViolation("ULA needs Re(eig(A)) > 0")
    if allow_zero and gamma == 0:
        return
    lam_max = float(np.max(np.abs(ev)))
    # |1 - gamma ev| < 1 for every eigenvalue; reduces to gamma < 2/lam_max for real spectra
    if gamma <= 0 or np.max(np.abs(1.0 - gamma * ev)) >= 1.0:
        raise StabilityViolation(f"gamma={gamma} violates the ULA bound gamma < 2/lambda_max(A) = {2.0 / lam_max:.6g}")


def ula_stationary(score, gamma):
    """Exact stationary law of ULA for the affine score; gamma = 0 gives the continuous-time law."""
    A, b = score.A, score.b
    _check_ula(A, gamma, allow_zero=True)
    cov = lyap_inverse_dense(A, gamma, 2.0 * np.eye(score.dim))
    return UlaStationary(np.linalg.solve(A, b), SpdMatrix.from_array(0.5 * (cov + cov.T)))


def run_ula_chain(score, gamma, cfg, path="ula"):
    """Simulate ULA from y = 0 and estimate the stationary mean and covariance."""
    A, b = score.A, score.b
    _check_ula(A, gamma)
    d = score.dim
    R = cfg.replicas
    if cfg.burn_in is None:
        rate = float(np.min(np.linalg.eigvals(A).real))
        burn = math.ceil(10.0 / (gamma * rate))
    else:
        burn = cfg.burn_in
    M = np.eye(d) - gamma * A
    drift = gamma * b
    scale = math.sqrt(2.0 * gamma)
    y = np.zeros((R, d))
    noise = NoiseStream(cfg.seed, path + "/noise", R, d)
    acc = MomentAccumulator(R, cfg.n_records, d, shift=np.linalg.solve(A, b))
    for k in range(burn + cfg.n_steps):
        y = y @ M.T + drift + scale * noise.next()
        if k % 256 == 0 and not np.abs(y).max() < DIVERGENCE_NORM:
            raise StabilityViolation(f"ULA diverged at step {k}: |y| exceeds {DIVERGENCE_NORM:g}")
        j = k - burn
        if j >= 0 and j % cfg.thinning == 0 and acc.k < cfg.n_records:
            acc.add(y)
    return acc.estimate()


def _optimal_parts(C_data, sigma, gamma):
    C = as_spd(C_data)
    ls = C.eigvals + sigma**2
    if not 0 <= gamma < 2.0 * ls.min():
        raise StabilityViolation(f"gamma={gamma} violates gamma < 2 min(lambda + sigma^2) = {2.0 * ls.min():.6g}")
    A_star = SpdMatrix.from_eig(1.0 / ls, C.eigvecs)
    return C, A_star


def sigma_expansion(C_data, sigma, gamma, Delta):
    """(Sigma_0, Sigma_1, Sigma_2) with Sigma(A* + eps Delta) = Sigma_0 + eps Sigma_1 + eps^2 Sigma_2 + O(eps^3).

    A* = (C_data + sigma^2 I)^-1 is the optimal score matrix.
    """
    C, A_star = _optimal_parts(C_data, sigma, gamma)
    D = np.asarray(Delta, dtype=float)
    d = C.dim
    S0 = lyap_inverse_spd(A_star, gamma, 2.0 * np.eye(d))
    M = np.eye(d) - gamma * A_star.entries
    S1 = -lyap_inverse_spd(A_star, gamma, D @ S0 @ M + M @ S0 @ D.T)
    S2 = -lyap_inverse_spd(A_star, gamma, D @ S1 @ M + M @ S1 @ D.T - gamma * D @ S0 @ D.T)
    return S0, S1, S2


def mean_term(C_data, sigma, cov_delta):
    """eps^2 coefficient of the expected squared mean gap: <C_sigma^2, Cov(delta)>."""
    C = as_spd(C_data)
    Cs = C.entries + sigma**2 * np.eye(C.dim)
    return float(np.sum((Cs @ Cs) * np.asarray(cov_delta, dtype=float)))


# kernel building blocks

def _domain(ls_i, ls_j, gamma):
    ls_i, ls_j = np.asarray(ls_i, dtype=float), np.asarray(ls_j, dtype=float)
    if np.any(gamma < 0) or np.any(gamma >= np.minimum(ls_i, ls_j)):
        raise DomainError(f"kernels need 0 <= gamma < min(lambda^sigma); got gamma={gamma}")


def _pieces(lam, ls, gamma):
    s = ls**2 / (ls - gamma / 2.0)
    f = 1.0 - gamma / ls
    return s, f, s * f


def _G(ls_i, ls_j, gamma):
    return ls_i * ls_j / (ls_i + ls_j - gamma)


def kernel_psi(lam, ls, gamma):
    """Zeroth-order Bures term (sqrt(lam) - ls / sqrt(ls - gamma/2))^2."""
    _domain(ls, ls, gamma)
    return (np.sqrt(lam) - ls / np.sqrt(ls - gamma / 2.0)) ** 2


def _bures_parts(lam_i, lam_j, ls_i, ls_j, gamma):
    s_i, f_i, l_i = _pieces(lam_i, ls_i, gamma)
    s_j, f_j, l_j = _pieces(lam_j, ls_j, gamma)
    G_ij = _G(ls_i, ls_j, gamma)
    G_ii = _G(ls_i, ls_i, gamma)
    r_i, r_j = np.sqrt(lam_i * s_i), np.sqrt(lam_j * s_j)
    K = lam_i * lam_j * G_ij**2 / (r_i + r_j) ** 2
    h = 1.0 / r_i + 1.0 / r_j
    g_hat = 1.0 - np.sqrt(lam_i / s_i)
    return s_i, f_i, l_i, s_j, l_j, G_ij, G_ii, K, h, g_hat


def kernel_alpha(lam_i, lam_j, ls_i, ls_j, gamma):
    """Weight of E<Delta, u_i u_j^T>^2 in the squared Bures distance."""
    _domain(ls_i, ls_j, gamma)
    s_i, f_i, l_i, s_j, l_j, G_ij, G_ii, K, h, g_hat = _bures_parts(lam_i, lam_j, ls_i, ls_j, gamma)
    return K * l_j**2 * h + g_hat * G_ii * (2.0 * f_i * G_ij * l_j + gamma * s_j)


def kernel_beta(lam_i, lam_j, ls_i, ls_j, gamma):
    """Weight of E<Delta, u_i u_j^T><Delta, u_j u_i^T> in the squared Bures distance."""
    _domain(ls_i, ls_j, gamma)
    s_i, f_i, l_i, s_j, l_j, G_ij, G_ii, K, h, g_hat = _bures_parts(lam_i, lam_j, ls_i, ls_j, gamma)
    return K * l_i * l_j * h + 2.0 * g_hat * G_ii * f_i * G_ij * l_i


def kernel_psi_l2(lam, ls, gamma):
    """Zeroth-order Frobenius term (lam - ls^2/(ls - gamma/2))^2."""
    _domain(ls, ls, gamma)
    return (lam - ls**2 / (ls - gamma / 2.0)) ** 2


def kernel_alpha_l2(lam_i, lam_j, ls_i, ls_j, gamma):
    _domain(ls_i, ls_j, gamma)
    s_i, f_i, l_i = _pieces(lam_i, ls_i, gamma)
    s_j, f_j, l_j = _pieces(lam_j, ls_j, gamma)
    G_ij, G_ii = _G(ls_i, ls_j, gamma), _G(ls_i, ls_i, gamma)
    g = lam_i - s_i
    return 2.0 * G_ij**2 * l_j**2 - 2.0 * g * G_ii * (2.0 * f_i * G_ij * l_j + gamma * s_j)


def kernel_beta_l2(lam_i, lam_j, ls_i, ls_j, gamma):
    _domain(ls_i, ls_j, gamma)
    s_i, f_i, l_i = _pieces(lam_i, ls_i, gamma)
    s_j, f_j, l_j = _pieces(lam_j, ls_j, gamma)
    G_ij, G_ii = _G(ls_i, ls_j, gamma), _G(ls_i, ls_i, gamma)
    g = lam_i - s_i
    return 2.0 * G_ij**2 * l_i * l_j - 4.0 * g * G_ii * f_i * G_ij * l_i


KERNELS = {
    "wasserstein": (kernel_psi, kernel_alpha, kernel_beta),
    "l2": (kernel_psi_l2, kernel_alpha_l2, kernel_beta_l2),
}


def kernel_matrices(lam, sigma, gamma, flavor="wasserstein"):
    """(psi vector, alpha matrix, beta matrix) over a spectrum."""
    if flavor not in KERNELS:
        raise ValueError(f"flavor must be one of {FLAVORS}")
    psi, alpha, beta = KERNELS[flavor]
    lam = np.asarray(lam, dtype=float)
    ls = lam + sigma**2
    li, lj = lam[:, None], lam[None, :]
    si, sj = ls[:, None], ls[None, :]
    return psi(lam, ls, gamma), alpha(li, lj, si, sj, gamma), beta(li, lj, si, sj, gamma)


@dataclass(frozen=True)
class PerturbationLaw:
    """Second moments of the zero-mean score perturbation (delta, Delta).

    ``cov_delta`` is in the original coordinates; ``m2[i, j]`` is
    E<Delta, u_i u_j^T>^2 and ``m2x[i, j]`` is
    E<Delta, u_i u_j^T><Delta, u_j u_i^T> in the data eigenbasis.
    """

    cov_delta: np.ndarray
    m2: np.ndarray
    m2x: np.ndarray

    def __post_init__(self):
        m2 = np.asarray(self.m2, dtype=float)
        m2x = np.asarray(self.m2x, dtype=float)
        cd = np.asarray(self.cov_delta, dtype=float)
        tol = 1e-12 * max(1.0, np.abs(m2).max(initial=0.0))
        if np.any(m2 < -tol):
            raise ValueError("m2 must be entrywise nonnegative")
        if np.abs(m2x - m2x.T).max(initial=0.0) > tol:
            raise ValueError("m2x must be symmetric")
        if np.any(np.abs(m2x) > np.sqrt(np.clip(m2 * m2.T, 0.0, None)) + tol):
            raise ValueError("m2x violates the Cauchy-Schwarz bound")
        object.__setattr__(self, "m2", m2)
        object.__setattr__(self, "m2x", m2x)
        object.__setattr__(self, "cov_delta", cd)

    @classmethod
    def zero(cls, d):
        z = np.zeros((d, d))
        return cls(z, z, z)

    @classmethod
    def from_covariances(cls, cov_b, cov_A, U):
        """Project Cov(b) and Cov(vec A) (column-major) onto the basis U."""
        d = U.shape[0]
        m2 = np.empty((d, d))
        m2x = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                e_ij = np.kron(U[:, j], U[:, i])  # vec(u_i u_j^T)
                e_ji = np.kron(U[:, i], U[:, j])
                m2[i, j] = e_ij @ cov_A @ e_ij
                m2x[i, j] = e_ij @ cov_A @ e_ji
        return cls(np.asarray(cov_b, dtype=float), m2, 0.5 * (m2x + m2x.T))

    def sample(self, rng, n, U):
        """Draw n Gaussian pairs (delta, Delta) matching these moments.

        Entries <Delta, u_i u_j^T> are independent across unordered pairs
        {i, j}; within a pair the (ij, ji) covariance is m2x.
        """
        d = self.m2.shape[0]
        w, V = np.linalg.eigh(self.cov_delta)
        delta = rng.standard_normal((n, d)) @ (V * np.sqrt(np.clip(w, 0.0, None))).T
        Ut = np.zeros((n, d, d))
        for i in range(d):
            Ut[:, i, i] = math.sqrt(self.m2[i, i]) * rng.standard_normal(n)
            for j in range(i + 1, d):
                cov = np.array([[self.m2[i, j], self.m2x[i, j]], [self.m2x[i, j], self.m2[j, i]]])
                ew, ev = np.linalg.eigh(cov)
                z = rng.standard_normal((n, 2)) @ (ev * np.sqrt(np.clip(ew, 0.0, None))).T
                Ut[:, i, j], Ut[:, j, i] = z[:, 0], z[:, 1]
        return delta, U @ Ut @ U.T


def expected_w2_perturbed(C_data, sigma, gamma, law, eps, flavor="wasserstein"):
    """Second-order model of E[D(N(0, C_data), q_eps)] for the ULA law q_eps of
    the score (A* + eps Delta, eps delta).

    ``flavor="wasserstein"`` models the squared 2-Wasserstein distance,
    ``"l2"`` the squared mean gap plus squared Frobenius covariance gap.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    C = as_spd(C_data)
    psi, alpha, beta = kernel_matrices(C.eigvals, sigma, gamma, flavor)
    quad = mean_term(C, sigma, law.cov_delta) + float(np.sum(alpha * law.m2 + beta * law.m2x))
    return float(np.sum(psi)) + eps**2 * quad


def perturbed_distance(C_data, sigma, gamma, delta, Delta, eps, flavor="wasserstein"):
    """Exact distance between N(0, C_data) and the ULA law of (A* + eps Delta, eps delta)."""
    C, A_star = _optimal_parts(C_data, sigma, gamma)
    score = LinearScore(A_star.entries + eps * np.asarray(Delta), eps * np.asarray(delta))
    q = ula_stationary(score, gamma)
    p = GaussianModel(np.zeros(C.dim), C)
    if flavor == "wasserstein":
        return w2_sq_gauss(p, q.as_gaussian())
    return l2_gauss_distance(p, q.as_gaussian())
