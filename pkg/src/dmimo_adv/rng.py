"""Deterministic per-purpose random streams.

Every stream is keyed by ``(master_seed, purpose, index...)`` so any sample can be
regenerated on its own, in any order, by any worker.
"""

import hashlib

import numpy as np

PURPOSES = {
    "sample": 1,
    "eval": 2,
    "gaussian": 3,
    "pool": 4,
    "malicious": 5,
    "bootstrap": 6,
    "init": 7,
    "shuffle": 8,
}


def stream(master_seed, purpose, *index):
    key = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, PURPOSES[purpose], *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(key))


def stable_hash(text):
    """64-bit integer digest of a string, stable across processes and platforms."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
