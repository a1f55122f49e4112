"""Expected squared Wasserstein error of the full pipeline: SGD training of
the affine score on N samples, then ULA sampling with the learned score.

The error is expanded as
    sum_i h0(lam_i) + (tau/sigma^2) sum_ij k_tau + (tau/(N sigma^2)) sum_ij k_tauN
    + (1/N) sum_ij k_N
and depends on the data only through its spectrum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .diagnostics import loglog_slope
from .errors import DomainError, InvalidN, StabilityViolation
from .gaussian_metrics import GaussianModel, w2_sq_gauss
from .langevin import PerturbationLaw, kernel_alpha, kernel_beta, kernel_psi, ula_stationary
from .matrixkit import as_spd, vec
from .score_theory import TAU_N_COEFFICIENTS, TAU_N_CONVENTIONS, LinearScore, sgd_stepsize_bound
from .sgd_sim import EmpiricalData, _datasets, sgd_snapshots, split_theta


@dataclass(frozen=True)
class PipelineParams:
    sigma: float
    tau: float
    gamma: float
    N: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not (self.N == math.inf or self.N >= 2):
            raise InvalidN(f"N must be >= 2, got {self.N}")

    def validate(self, spectrum):
        lam = np.asarray(spectrum, dtype=float)
        bound = 2.0 / max(lam.max() + self.sigma**2, 1.0)
        if self.tau >= bound:
            raise StabilityViolation(
                f"tau={self.tau} violates the SGD stability bound 2/max(max_k lambda_k + sigma^2, 1) = {bound:.6g}"
            )
        if self.gamma >= lam.min() + self.sigma**2:
            raise DomainError(f"gamma={self.gamma} must be < min(lambda + sigma^2) = {lam.min() + self.sigma**2:.6g}")


@dataclass(frozen=True)
class ErrorBreakdown:
    term0: float
    term_tau: float
    term_tauN: float
    term_N: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.term0 + self.term_tau + self.term_tauN + self.term_N)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("term0", "term_tau", "term_tauN", "term_N", "total")}


def _tau_n_weights(lam, sigma, convention):
    """kappa_i with tauN part of the eigen-variance equal to tau/(N sigma^2) kappa_i."""
    if convention not in TAU_N_CONVENTIONS:
        raise ValueError(f"unknown tau_n_term {convention!r}")
    lam = np.asarray(lam, dtype=float)
    ls = lam + sigma**2
    if convention == "derived":
        return -0.5 * sigma**2 * (lam / ls**2 + lam**2 / ls**3 + np.sum(lam / ls) * lam / ls**2)
    return TAU_N_COEFFICIENTS[convention] * (lam / ls) ** 2


def pipeline_kernels(lam_i, lam_j, sigma, gamma, tau_n_term="minus", kappa_i=None):
    """(h0_i, k_tau, k_N, k_tauN) for one eigenvalue pair.

    The diagonal indicator is taken as lam_i == lam_j, so equal arguments
    mean the same eigen-direction.

    ``kappa_i`` overrides the tauN weight of eigenvalue i (needed for the
    ``"derived"`` convention, which depends on the whole spectrum).
    """
    ls_i, ls_j = lam_i + sigma**2, lam_j + sigma**2
    a = kernel_alpha(lam_i, lam_j, ls_i, ls_j, gamma)
    b_ii = kernel_beta(lam_i, lam_i, ls_i, ls_i, gamma)
    ab = a + kernel_beta(lam_i, lam_j, ls_i, ls_j, gamma)
    same = float(lam_i == lam_j) if np.isscalar(lam_i) else (np.asarray(lam_i) == np.asarray(lam_j)).astype(float)
    return _kernels(lam_i, lam_j, ls_i, ls_j, gamma, same, a, ab, b_ii, sigma, tau_n_term, kappa_i)


def _kernels(lam_i, lam_j, ls_i, ls_j, gamma, same, a, ab, b_ii, sigma, tau_n_term, kappa_i):
    h0 = kernel_psi(lam_i, ls_i, gamma)
    p_i = lam_i / ls_i
    k_tau = 0.5 * p_i * a + same * 0.5 * p_i * (ls_i**2 + b_ii)
    if kappa_i is None:
        if tau_n_term == "derived":
            raise ValueError("the derived tau/N convention needs kappa_i")
        kappa_i = TAU_N_COEFFICIENTS[tau_n_term] * p_i**2
    k_tauN = kappa_i * a + same * kappa_i * (ls_i**2 + b_ii)
    q = lam_i * lam_j / (ls_i * ls_j) ** 2
    k_N = same * lam_i + q * (1.0 + same) * ab
    return h0, k_tau, k_N, k_tauN


def expected_pipeline_error(spectrum, params, tau_n_term="minus"):
    """Second-order model of E[W2^2(p_data, q)] for the learned-score ULA law q."""
    lam = np.asarray(spectrum, dtype=float)
    if lam.ndim != 1 or lam.size == 0 or np.any(lam <= 0):
        raise ValueError("spectrum must be a nonempty list of positive reals")
    params.validate(lam)
    s, g = params.sigma, params.gamma
    d = lam.size
    li, lj = np.meshgrid(lam, lam, indexing="ij")
    si, sj = li + s**2, lj + s**2
    a = kernel_alpha(li, lj, si, sj, g)
    ab = a + kernel_beta(li, lj, si, sj, g)
    b_ii = np.diag(kernel_beta(li, li, si, si, g))[:, None]
    kappa = _tau_n_weights(lam, s, tau_n_term)[:, None]
    h0, k_tau, k_N, k_tauN = _kernels(li, lj, si, sj, g, np.eye(d), a, ab, b_ii, s, tau_n_term, kappa)
    N = params.N
    inv_N = 0.0 if N == math.inf else 1.0 / N
    return ErrorBreakdown(
        term0=float(np.sum(np.diag(h0))),
        term_tau=float(params.tau / s**2 * np.sum(k_tau)),
        term_tauN=float(params.tau * inv_N / s**2 * np.sum(k_tauN)),
        term_N=float(inv_N * np.sum(k_N)),
    )


def perturbation_law_from_sgd(C_data, sigma, tau, N, tau_n_term="minus"):
    """Law of (b, A - A*) under stationary SGD, in the data eigenbasis.

    The score perturbation is written with eps = 1, so
    expected_w2_perturbed(..., law, eps=1) is the pipeline model.
    """
    C = as_spd(C_data)
    lam = C.eigvals
    if tau >= sgd_stepsize_bound(C, sigma):
        raise StabilityViolation(
            f"tau={tau} violates the SGD stability bound 2/max(max_k lambda_k + sigma^2, 1) = {sgd_stepsize_bound(C, sigma):.6g}"
        )
    if not (N == math.inf or N >= 2):
        raise InvalidN(f"N must be >= 2, got {N}")
    ls = lam + sigma**2
    p = lam / ls
    inv_N = 0.0 if N == math.inf else 1.0 / N
    t = tau / (2.0 * sigma**2) * p + tau * inv_N / sigma**2 * _tau_n_weights(lam, sigma, tau_n_term)
    q = lam / ls**2
    eye = np.eye(lam.size)
    gen = inv_N * np.outer(q, q) * (1.0 + eye)
    m2 = t[:, None] * np.ones_like(eye) + gen
    m2x = eye * t[:, None] + gen
    var_b = t + inv_N * q
    cov_delta = (C.eigvecs * var_b) @ C.eigvecs.T
    return PerturbationLaw(cov_delta, m2, m2x)


def mean_bias_term(spectrum, params):
    """First-order error from the bias of E[A] over datasets.

    E[(C_N + sigma^2 I)^-1] - (C + sigma^2 I)^-1 is O(1/N); its eigenvalues
    (1/N)(lam/ls^2 + lam^2/ls^3 + sum_k(lam_k/ls_k) lam/ls^2) enter the
    error through the first-order Bures coefficient. This term is not part
    of the second-order model and is reported separately.
    """
    lam = np.asarray(spectrum, dtype=float)
    params.validate(lam)
    if params.N == math.inf:
        return 0.0
    s, g = params.sigma, params.gamma
    ls = lam + s**2
    bias = (lam / ls**2 + lam**2 / ls**3 + np.sum(lam / ls) * lam / ls**2) / params.N
    sig0 = ls**2 / (ls - g / 2.0)
    ell = sig0 * (1.0 - g / ls)
    G = ls**2 / (2.0 * ls - g)
    dsig = -2.0 * G * ell * bias
    return float(np.sum((1.0 - np.sqrt(lam / sig0)) * dsig))


@dataclass(frozen=True)
class TradeoffScan:
    sigmas: np.ndarray
    rows: list
    errors: list
    sigma_star: float
    total_star: float
    interior: bool


def sigma_tradeoff_scan(spectrum, tau, gamma, N, sigma_grid, tau_n_term="minus", rtol=1e-4):
    """Pipeline error over a sigma grid; golden-section refinement of an interior minimum."""
    sigmas = np.asarray(sigma_grid, dtype=float)
    rows, errors = [], []
    for s in sigmas:
        try:
            rows.append(expected_pipeline_error(spectrum, PipelineParams(s, tau, gamma, N), tau_n_term))
            errors.append(None)
        except (DomainError, StabilityViolation) as exc:
            rows.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
    valid = [k for k, r in enumerate(rows) if r is not None]
    if not valid:
        raise DomainError("no grid point lies inside the domain")
    totals = np.array([rows[k].total for k in valid])
    kmin = int(np.argmin(totals))
    interior = 0 < kmin < len(valid) - 1
    if not interior:
        k = valid[kmin]
        return TradeoffScan(sigmas, rows, errors, float(sigmas[k]), float(totals[kmin]), False)

    def f(s):
        return expected_pipeline_error(spectrum, PipelineParams(s, tau, gamma, N), tau_n_term).total

    lo, mid, hi = (sigmas[valid[kmin + o]] for o in (-1, 0, 1))
    res = optimize.minimize_scalar(f, bracket=(lo, mid, hi), method="golden", tol=rtol)
    s_star = float(res.x)
    if not lo <= s_star <= hi or res.fun > totals[kmin]:
        s_star, f_star = float(mid), float(totals[kmin])
    else:
        f_star = float(res.fun)
    return TradeoffScan(sigmas, rows, errors, s_star, f_star, True)


@dataclass(frozen=True)
class NestedMCResult:
    mean: float
    se: float
    n_outer: int
    samples: np.ndarray


def rotate_spectrum(spectrum, rng=None):
    """Covariance with the given eigenvalues in a random (or canonical) basis."""
    lam = np.asarray(spectrum, dtype=float)
    d = lam.size
    if rng is None:
        return np.diag(lam)
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    return (Q * lam) @ Q.T


def _sgd_means(C, sigma, src, R, path):
    """Per-dataset SGD stationary means (vec(A), b): the tau -> 0 limit of the iterates."""
    d = C.dim
    if src == "exact":
        A = np.linalg.inv(C.entries + sigma**2 * np.eye(d))
        return np.tile(np.concatenate([vec(A), np.zeros(d)]), (R, 1))
    mus, _, covs = _datasets(C, np.zeros(d), src, R, path)
    A = np.linalg.inv(covs + sigma**2 * np.eye(d))
    b = np.einsum("rij,rj->ri", A, mus)
    return np.concatenate([A.transpose(0, 2, 1).reshape(R, d * d), b], axis=1)


def nested_pipeline_mc(C_data, params, n_outer=200, n_snapshots=10, every=None, seed=0, path="nested"):
    """Full pipeline Monte Carlo.

    Each outer draw samples its own dataset of size N and runs SGD to
    stationarity. ``n_snapshots`` iterates (A, b), spaced ``every`` steps
    apart (default: one relaxation time), are each turned into an exact ULA
    stationary law and its squared W2 distance to the data law. With
    tau = 0 the iterates sit at the per-dataset SGD mean. Outer draws
    are independent; the standard error is over their per-draw averages.
    """
    C = as_spd(C_data)
    d = C.dim
    params.validate(C.eigvals)
    src = "exact" if params.N == math.inf else EmpiricalData(int(params.N), seed, per_replica=True)
    if params.tau == 0:
        snaps = _sgd_means(C, params.sigma, src, n_outer, path)[:, None, :]
        n_snapshots = 1
    else:
        if every is None:
            every = math.ceil(1.0 / (params.tau * min(C.eigvals[-1] + params.sigma**2, 1.0)))
        snaps, _ = sgd_snapshots(C, params.sigma, params.tau, src, n_outer, n_snapshots, every, seed=seed, path=path)
    p = GaussianModel(np.zeros(d), C)
    vals = np.empty((n_outer, n_snapshots))
    for r in range(n_outer):
        for k in range(n_snapshots):
            A, b = split_theta(snaps[r, k], d)
            q = ula_stationary(LinearScore(A, b), params.gamma)
            vals[r, k] = w2_sq_gauss(p, q.as_gaussian())
    per_draw = vals.mean(axis=1)
    return NestedMCResult(float(per_draw.mean()), float(per_draw.std(ddof=1) / math.sqrt(n_outer)), n_outer, per_draw)


@dataclass(frozen=True)
class ConvergenceReport:
    scan: str
    grid: np.ndarray
    remainder: np.ndarray
    remainder_se: np.ndarray
    slope: object


def convergence_study(spectrum, params, scan, grid, n_outer=200, n_snapshots=10, seed=0):
    """Remainder of the pipeline model against nested MC along one parameter.

    ``scan`` is ``"tau"``, ``"N"`` or ``"gamma"``; the log-log slope of
    |MC - model| is fitted against the scanned value (against 1/N for N).
    """
    if scan not in ("tau", "N", "gamma"):
        raise ValueError("scan must be one of tau, N, gamma")
    C = np.diag(np.asarray(spectrum, dtype=float))
    rem, se = [], []
    for k, v in enumerate(grid):
        p = PipelineParams(**{**params.__dict__, scan: v})
        model = expected_pipeline_error(spectrum, p).total
        mc = nested_pipeline_mc(C, p, n_outer, n_snapshots, seed=seed, path=f"convergence/{scan}/{k}")
        rem.append(mc.mean - model)
        se.append(mc.se)
    x = 1.0 / np.asarray(grid, dtype=float) if scan == "N" else np.asarray(grid, dtype=float)
    rem = np.array(rem)
    slope = loglog_slope(x, rem) if np.all(rem != 0) else None
    return ConvergenceReport(scan, np.asarray(grid, dtype=float), rem, np.array(se), slope)
