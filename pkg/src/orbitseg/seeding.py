"""Seed derivation.

Per-item seeds are derived with the splitmix64 finalizer so that any item of
a batch can be regenerated without replaying a shared random stream::

    derive_seed(base, *keys) = fold(splitmix64, base, keys)

where each step mixes ``state ^ key`` (string keys are first reduced to a
64-bit FNV-1a hash).
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _fnv1a(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def derive_seed(base: int, *keys: int | str) -> int:
    state = splitmix64(int(base) & MASK64)
    for key in keys:
        k = _fnv1a(key) if isinstance(key, str) else int(key) & MASK64
        state = splitmix64(state ^ k)
    return state


def rng_for(base: int, *keys: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(base, *keys)))
