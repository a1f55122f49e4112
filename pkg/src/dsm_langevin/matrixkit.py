"""Dense linear-algebra primitives: vec/Kronecker calculus and the
operator X -> C X + X C^T - tau C X C^T together with its inverse.

All vectorizations are column-major (Fortran order), so that
``vec(A @ B @ C) == kron(C.T, A) @ vec(B)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotSPD, SingularSystem, StabilityViolation

ASYMMETRY_TOL = 1e-8
COND_LIMIT = 1e12


def vec(X):
    """Stack the columns of ``X`` into a vector."""
    X = np.asarray(X)
    return X.reshape(-1, order="F")


def unvec(v, d):
    v = np.asarray(v)
    if v.ndim != 1 or v.size != d * d:
        raise ValueError(f"unvec expects a vector of length {d * d}, got shape {v.shape}")
    return v.reshape(d, d, order="F")


def kron(A, B):
    return np.kron(np.asarray(A), np.asarray(B))


def commutation_matrix(d):
    """The d^2 x d^2 permutation P with P @ vec(X) == vec(X.T)."""
    P = np.zeros((d * d, d * d))
    idx = np.arange(d * d).reshape(d, d, order="F")
    # vec(X.T)[k] = vec(X)[idx.T.ravel(order="F")[k]]
    P[np.arange(d * d), idx.T.reshape(-1, order="F")] = 1.0
    return P


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric positive-definite matrix with its eigendecomposition.

    Eigenvalues are stored in descending order.
    """

    entries: np.ndarray
    eigvals: np.ndarray = field(repr=False)
    eigvecs: np.ndarray = field(repr=False)

    @classmethod
    def from_array(cls, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.ndim != 2 or X.shape[0] != X.shape[1]:
            raise NotSPD(f"expected a square matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise NotSPD("matrix has non-finite entries")
        scale = max(np.abs(X).max(), np.finfo(float).tiny)
        if np.abs(X - X.T).max() > ASYMMETRY_TOL * scale:
            raise NotSPD("matrix is not symmetric")
        S = 0.5 * (X + X.T)
        w, U = np.linalg.eigh(S)
        if w[0] <= 0:
            raise NotSPD(f"smallest eigenvalue {w[0]:.3e} is not positive")
        return cls(S, w[::-1].copy(), U[:, ::-1].copy())

    @classmethod
    def from_eig(cls, eigvals, eigvecs):
        w = np.asarray(eigvals, dtype=float)
        U = np.asarray(eigvecs, dtype=float)
        order = np.argsort(w)[::-1]
        w, U = w[order], U[:, order]
        if np.any(w <= 0):
            raise NotSPD("eigenvalues must be positive")
        S = (U * w) @ U.T
        return cls(0.5 * (S + S.T), w, U)

    @property
    def dim(self):
        return self.entries.shape[0]

    def apply_fn(self, f):
        """U f(Lambda) U^T for a scalar function ``f`` applied to the eigenvalues."""
        M = (self.eigvecs * f(self.eigvals)) @ self.eigvecs.T
        return 0.5 * (M + M.T)

    def sqrt(self):
        return self.apply_fn(np.sqrt)

    def inv(self):
        return self.apply_fn(lambda w: 1.0 / w)


def as_spd(C):
    return C if isinstance(C, SpdMatrix) else SpdMatrix.from_array(C)


@dataclass(frozen=True)
class LyapunovOp:
    """X -> C X + X C^T - tau C X C^T on p x p matrices."""

    C: np.ndarray
    tau: float = 0.0

    def __call__(self, X):
        return lyap_apply(self, X)

    def matrix(self):
        """Dense p^2 x p^2 representation acting on vec(X)."""
        C = np.asarray(self.C, dtype=float)
        I = np.eye(C.shape[0])
        return np.kron(I, C) + np.kron(C, I) - self.tau * np.kron(C, C)


def lyap_apply(op, X):
    C = np.asarray(op.C, dtype=float)
    X = np.asarray(X, dtype=float)
    if C.shape != X.shape:
        raise ValueError(f"shape mismatch: C {C.shape} vs X {X.shape}")
    return C @ X + X @ C.T - op.tau * C @ X @ C.T


def stability_bound(C):
    """Largest admissible tau for an SPD C: 2 / max eig(C)."""
    return 2.0 / as_spd(C).eigvals[0]


def lyap_inverse_spd(C, tau, X):
    """Inverse of the Lyapunov-type operator for SPD ``C``, via its eigenbasis.

    In the eigenbasis the operator is diagonal with entries
    g_i + g_j - tau g_i g_j.
    """
    C = as_spd(C)
    if tau < 0:
        raise StabilityViolation(f"tau must be nonnegative, got {tau}")
    if tau > 0 and tau * C.eigvals[0] >= 2.0:
        raise StabilityViolation(
            f"tau={tau} violates tau < 2/max eig(C) = {2.0 / C.eigvals[0]:.6g}"
        )
    g = C.eigvals
    U = C.eigvecs
    denom = g[:, None] + g[None, :] - tau * np.outer(g, g)
    Y = (U.T @ np.asarray(X, dtype=float) @ U) / denom
    return U @ Y @ U.T


def lyap_inverse_dense(C, tau, X):
    """Brute-force inverse through the vectorized p^2 x p^2 system.

    ``C`` need not be symmetric.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = C.shape[0]
    K = LyapunovOp(C, tau).matrix()
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystem(f"Lyapunov system condition number {cond:.3e} exceeds {COND_LIMIT:.0e}")
    return unvec(np.linalg.solve(K, vec(X)), p)
