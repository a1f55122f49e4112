"""Chain configuration, pooled moment accumulation and jackknife errors
shared by the SGD and ULA simulators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import replica_rng

MIN_RECORDS = 1000
N_BATCHES = 30
MIN_REPLICA_UNITS = 30
CHUNK_FLOATS = 4_000_000
DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class ChainConfig:
    """Run lengths and seeding for a set of parallel chains.

    ``burn_in=None`` selects the simulator's default.
    """

    n_steps: int = 20_000
    burn_in: int | None = None
    thinning: int = 1
    seed: int = 0
    replicas: int = 1

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.thinning < 1:
            raise ValueError("thinning must be a positive integer")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.n_steps // self.thinning < MIN_RECORDS:
            raise ValueError(
                f"n_steps/thinning = {self.n_steps // self.thinning} < {MIN_RECORDS} recorded iterates"
            )

    @property
    def n_records(self):
        return self.n_steps // self.thinning


@dataclass(frozen=True)
class MomentEstimate:
    """Pooled mean and covariance of recorded iterates with jackknife errors.

    Error units are replicas when there are at least 30 of them, otherwise
    30 consecutive batches within each replica.
    """

    mean: np.ndarray
    cov: np.ndarray
    se_mean: np.ndarray
    se_cov: np.ndarray
    n_effective: float
    n_units: int
    extras: dict = field(default_factory=dict)

    def z_scores(self, mean=None, cov=None):
        """Elementwise (estimate - reference) / SE; zero where both gaps and SE vanish."""
        out = []
        for est, se, ref in ((self.mean, self.se_mean, mean), (self.cov, self.se_cov, cov)):
            if ref is None:
                continue
            gap = est - np.asarray(ref, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap == 0, 0.0, np.copysign(np.inf, gap)))
            out.append(z)
        return out[0] if len(out) == 1 else tuple(out)


class MomentAccumulator:
    """Per-unit first and second moment sums of vector observations."""

    def __init__(self, replicas, n_records, dim, shift=None):
        self.R = replicas
        self.B = 1 if replicas >= MIN_REPLICA_UNITS else N_BATCHES
        self.n_records = n_records
        self.dim = dim
        self.s1 = np.zeros((replicas, self.B, dim))
        self.s2 = np.zeros((replicas, self.B, dim, dim))
        self.count = np.zeros((replicas, self.B))
        self.shift = None if shift is None else np.asarray(shift, dtype=float)
        self.k = 0

    def add(self, obs):
        """Record one observation per replica; ``obs`` has shape (R, dim)."""
        if self.shift is None:
            self.shift = obs.mean(axis=0)
        y = obs - self.shift
        batch = self.k * self.B // self.n_records
        self.s1[:, batch] += y
        self.s2[:, batch] += y[:, :, None] * y[:, None, :]
        self.count[:, batch] += 1
        self.k += 1

    def estimate(self, extras=None):
        s1 = self.s1.reshape(-1, self.dim)
        s2 = self.s2.reshape(-1, self.dim, self.dim)
        cnt = self.count.reshape(-1)
        keep = cnt > 0
        s1, s2, cnt = s1[keep], s2[keep], cnt[keep]
        K = cnt.size
        n = cnt.sum()
        t1, t2 = s1.sum(axis=0), s2.sum(axis=0)
        m = t1 / n
        cov = t2 / n - np.outer(m, m)
        nk = (n - cnt)[:, None]
        mk = (t1[None] - s1) / nk
        covk = (t2[None] - s2) / nk[:, :, None] - mk[:, :, None] * mk[:, None, :]
        jk = (K - 1) / K
        se_mean = np.sqrt(jk * np.sum((mk - mk.mean(axis=0)) ** 2, axis=0))
        se_cov = np.sqrt(jk * np.sum((covk - covk.mean(axis=0)) ** 2, axis=0))
        cov = 0.5 * (cov + cov.T)
        se_cov = 0.5 * (se_cov + se_cov.T)
        diag = np.diag(cov)
        ok = se_mean > 0
        n_eff = float(np.median(diag[ok] / se_mean[ok] ** 2)) if np.any(ok) else math.inf
        return MomentEstimate(m + self.shift, cov, se_mean, se_cov, n_eff, K, extras or {})


class NoiseStream:
    """Standard normal draws for R replicas, each from its own generator.

    Draws are produced in chunks of steps; replica r's sequence depends only
    on (seed, path, r), not on R or on the chunk length.
    """

    def __init__(self, seed, path, replicas, width):
        self.gens = [replica_rng(seed, path, r) for r in range(replicas)]
        self.width = width
        self.chunk = max(1, CHUNK_FLOATS // (replicas * width))
        self.buf = None
        self.pos = 0

    def next(self):
        if self.buf is None or self.pos == self.buf.shape[0]:
            self.buf = np.stack([g.standard_normal((self.chunk, self.width)) for g in self.gens], axis=1)
            self.pos = 0
        out = self.buf[self.pos]
        self.pos += 1
        return out
