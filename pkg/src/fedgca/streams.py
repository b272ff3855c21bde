"""Counter-based random streams.

Every random draw in the package comes from a generator keyed by a tuple of
non-negative integers, e.g. ``(master_seed, round, client, epoch, batch)``.
Two call sites with different keys never share generator state, so the order
in which simulated clients run cannot change what any of them samples.
"""

from __future__ import annotations

from typing import Union

import numpy as np

SeedKey = Union[int, tuple]


def _components(key: SeedKey) -> list[int]:
    parts = key if isinstance(key, tuple) else (key,)
    flat: list[int] = []
    for p in parts:
        if isinstance(p, tuple):
            flat.extend(_components(p))
            continue
        p = int(p)
        if not 0 <= p < 2**64:
            raise ValueError(f"stream key components must lie in [0, 2**64), got {p}")
        flat.append(p)
    return flat


def _entropy(key: SeedKey) -> list[int]:
    # SeedSequence ignores trailing zero words, so prefix the length and give
    # every component exactly two words to keep the encoding injective.
    comps = _components(key)
    words = [len(comps)]
    for p in comps:
        words += [p & 0xFFFFFFFF, p >> 32]
    return words


def make_rng(key: SeedKey) -> np.random.Generator:
    """Philox generator for ``key`` (an int or a nested tuple of ints)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_entropy(key))))


def derive_seed(*key) -> int:
    """Collapse a key tuple into a single 63-bit integer seed."""
    state = np.random.SeedSequence(_entropy(tuple(key))).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
