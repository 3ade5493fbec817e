"""Named random sub-streams derived from one root seed.

``stream(seed, "pair", 17)`` always yields the same generator regardless of
what other streams were drawn before it, so records can be produced in any
order (or in parallel) with identical results.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names)))


def child_seed(seed: int, *names) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names)).generate_state(1)[0])
