"""Seeded, stream-split random generators.

Every consumer derives its generator from ``(seed, *keys)`` through
``numpy.random.SeedSequence`` with a ``spawn_key`` built from stable hashes of
the keys, and runs it on PCG64. Two streams with different keys are
statistically independent, and the draws of one stream never depend on how
many values another stream consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))
