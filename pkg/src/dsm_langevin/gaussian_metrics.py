"""Distances between Gaussian laws and second-order expansions of the
matrix square root and of the Bures distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrixkit import SpdMatrix, as_spd, lyap_inverse_spd

CLAMP_REL = 1e-14


def psd_sqrt(S):
    """Square root of a symmetric PSD matrix by eigendecomposition.

    Eigenvalues below ``1e-14 * max`` are clamped to that floor.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, U = np.linalg.eigh(S)
    floor = CLAMP_REL * max(w.max(), 0.0)
    w = np.where(w < floor, floor, w)
    R = (U * np.sqrt(w)) @ U.T
    return 0.5 * (R + R.T)


def _mat(S):
    return S.entries if isinstance(S, SpdMatrix) else np.atleast_2d(np.asarray(S, dtype=float))


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    cov: SpdMatrix

    @classmethod
    def create(cls, mean, cov):
        cov = as_spd(cov)
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if mean.shape != (cov.dim,):
            raise ValueError(f"mean has shape {mean.shape}, expected ({cov.dim},)")
        return cls(mean, cov)

    @property
    def dim(self):
        return self.cov.dim


def bures_sq(S1, S2):
    """Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    A, B = _mat(S1), _mat(S2)
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    R = psd_sqrt(A)
    cross = psd_sqrt(R @ B @ R)
    return max(float(np.trace(A) + np.trace(B) - 2.0 * np.trace(cross)), 0.0)


def w2_sq_gauss(g1, g2):
    """Squared 2-Wasserstein distance between two Gaussian laws."""
    if g1.dim != g2.dim:
        raise ValueError("dimension mismatch")
    dm = g1.mean - g2.mean
    return float(dm @ dm) + bures_sq(g1.cov, g2.cov)


def l2_gauss_distance(g1, g2):
    """Squared mean gap plus squared Frobenius gap of the covariances."""
    if g1.dim != g2.dim:
        raise ValueError("dimension mismatch")
    dm = g1.mean - g2.mean
    dC = _mat(g1.cov) - _mat(g2.cov)
    return float(dm @ dm) + float(np.sum(dC * dC))


def sqrt_taylor2(H0, H1):
    """Coefficients of (H0 + eps H1)^1/2 up to eps^2.

    Returns ``(H0^1/2, X1, X2)`` where X1 solves S X + X S = H1 with
    S = H0^1/2, and X2 solves S X + X S = -X1^2.
    """
    H0 = as_spd(H0)
    S = H0.sqrt()
    X1 = lyap_inverse_spd(S, 0.0, np.asarray(H1, dtype=float))
    X2 = -lyap_inverse_spd(S, 0.0, X1 @ X1)
    return S, X1, X2


def bures_taylor2(Sigma, H0, H1, H2=None):
    """Coefficients (c0, c1, c2) of B^2(Sigma, H0 + eps H1 + eps^2 H2)."""
    Sigma = as_spd(Sigma)
    H0 = as_spd(H0)
    H1 = np.asarray(H1, dtype=float)
    H2 = np.zeros_like(H1) if H2 is None else np.asarray(H2, dtype=float)
    R = Sigma.sqrt()
    S0 = SpdMatrix.from_array(psd_sqrt(R @ H0.entries @ R))
    Y1 = lyap_inverse_spd(S0, 0.0, R @ H1 @ R)
    Y2 = lyap_inverse_spd(S0, 0.0, R @ H2 @ R)
    Q = lyap_inverse_spd(S0, 0.0, Y1 @ Y1)
    c0 = bures_sq(Sigma, H0)
    c1 = float(np.trace(H1) - 2.0 * np.trace(Y1))
    c2 = float(np.trace(H2) - 2.0 * np.trace(Y2) + 2.0 * np.trace(Q))
    return c0, c1, c2
