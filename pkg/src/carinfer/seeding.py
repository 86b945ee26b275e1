"""Seed derivation for replication-level Monte Carlo.

Every replication gets its own 64-bit seed from ``derive_rep_seed``, which is
the SplitMix64 output function applied to ``master + (index + 1) * GOLDEN``
(all arithmetic mod 2**64)::

    z = (master + (index + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    z = z ^ (z >> 31)

``GOLDEN`` is odd, so the pre-mix step is injective in ``index`` for a fixed
master, and each mixing step is a bijection on 64-bit words; the map is
therefore collision free over any run shorter than 2**64 replications.

A replication seed is expanded into independent numpy generators through
``SeedSequence([rep_seed, tag])``; the tags below are fixed so that the
covariate draw and the error draw do not depend on which allocation procedure
consumed the allocation stream.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

COVARIATES = 0
ALLOCATION = 1
ERRORS = 2
EXTRA = 3


def _check_master(master_seed: int) -> int:
    master_seed = int(master_seed)
    if not 0 <= master_seed <= MASK64:
        raise ValueError(f"master seed must fit in 64 unsigned bits, got {master_seed}")
    return master_seed


def derive_rep_seed(master_seed: int, replication_index: int) -> int:
    """Return the 64-bit seed of replication ``replication_index``."""
    master_seed = _check_master(master_seed)
    if replication_index < 0:
        raise ValueError("replication index must be non-negative")
    z = (master_seed + (replication_index + 1) * GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_rep_seeds(master_seed: int, indices) -> np.ndarray:
    """Vectorised ``derive_rep_seed`` over an array of indices (uint64 result)."""
    master = np.uint64(_check_master(master_seed))
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = master + (idx + np.uint64(1)) * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def stream(seed: int, tag: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag])))


def replication_streams(master_seed: int, replication_index: int):
    """The (covariates, allocation, errors) generators of one replication."""
    seed = derive_rep_seed(master_seed, replication_index)
    return stream(seed, COVARIATES), stream(seed, ALLOCATION), stream(seed, ERRORS)


def entropy_seed() -> int:
    """A fresh 63-bit seed from system entropy, for CLI runs without ``--seed``."""
    return int(np.random.SeedSequence().entropy) & ((1 << 63) - 1)
