"""Deterministic RNG derivation.

Every random decision in the package draws from a generator derived from a
master seed plus a path of string/int tags, so independent stages never share
streams and reruns with the same seed are bit-identical regardless of call
order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag: object) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(seed: int, *path: object) -> np.random.Generator:
    """Generator for (seed, *path); stable across runs and platforms."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def stable_hash(*parts: object) -> int:
    """64-bit content hash, independent of PYTHONHASHSEED."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")
