"""Deterministic stream derivation from a master seed and a task path.

The task path (for example ``"verify/ula/case3"``) is hashed with BLAKE2b
into four 32-bit words that are appended to the master seed to form the
entropy of a ``numpy.random.SeedSequence``. Replica ``r`` of a task uses
``spawn_key=(r,)`` on top of that, so every replica owns an independent
stream that does not depend on how replicas are batched.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def path_words(path):
    digest = hashlib.blake2b(path.encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]


def task_seed(master, path=""):
    """SeedSequence for ``path`` under ``master``."""
    master = int(master)
    if not 0 <= master <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {master}")
    return np.random.SeedSequence([master & 0xFFFFFFFF, master >> 32, *path_words(path)])


def replica_seed(master, path, r, *extra):
    base = task_seed(master, path)
    return np.random.SeedSequence(base.entropy, spawn_key=(int(r), *extra))


def replica_rng(master, path, r, *extra):
    return np.random.Generator(np.random.PCG64(replica_seed(master, path, r, *extra)))


def task_rng(master, path=""):
    return np.random.Generator(np.random.PCG64(task_seed(master, path)))
