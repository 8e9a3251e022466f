"""Deterministic random streams.

Every randomized stage draws from a Philox counter-based generator whose
128-bit key is derived from (seed, frame_id, instance_id) with a SplitMix64
chain. Streams for different instances are independent, so per-instance work
can run in any order (or in parallel) without changing results. Python's
built-in ``hash`` is never used: it is salted per process.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Domain tags keep unrelated consumers of the same user seed on disjoint
# streams (e.g. mask sampling vs. evaluation-time point masking).
DOMAIN_SAMPLING = 0x7653414D504C4531
DOMAIN_MASKING = 0x45564C4D41534B31
DOMAIN_SIMULATOR = 0x53494D4E4F495345


def splitmix64(x: int) -> int:
    """One SplitMix64 mixing round; stable across platforms and versions."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_key(seed: int, frame_id: int = 0, instance_id: int = 0,
               domain: int = DOMAIN_SAMPLING) -> int:
    """Derive a 128-bit Philox key from (seed, frame, instance, domain)."""
    h = splitmix64((seed & _MASK64) ^ (domain & _MASK64))
    h = splitmix64(h ^ (frame_id & _MASK64))
    h = splitmix64(h ^ (instance_id & _MASK64))
    return h | (splitmix64(h) << 64)


def make_stream(seed: int, frame_id: int = 0, instance_id: int = 0,
                domain: int = DOMAIN_SAMPLING) -> np.random.Generator:
    """Independent generator for one (seed, frame, instance) triple."""
    key = derive_key(seed, frame_id, instance_id, domain)
    return np.random.Generator(np.random.Philox(key=key))


def choose_without_replacement(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Choose min(k, n) distinct indices from range(n), uniformly at random.

    Implemented as a partial Fisher-Yates shuffle, so every size-k subset
    and every ordering of it is equally likely.
    """
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    k = min(k, n)
    idx = np.arange(n, dtype=np.int64)
    if k == 0:
        return idx[:0]
    swaps = rng.integers(low=np.arange(k), high=n)
    for i in range(k):
        j = swaps[i]
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]
