"""Seed plumbing.

Every stochastic routine takes a ``seed`` argument which may be an int, a
``numpy.random.SeedSequence`` or an existing ``Generator``.  Replicate streams
are derived with ``SeedSequence.spawn`` so results never depend on a global RNG.
"""
from __future__ import annotations

from typing import Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def make_rng(seed: SeedLike = None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn(seed: SeedLike, n: int) -> list[np.random.Generator]:
    """Split ``seed`` into ``n`` independent generators (counter scheme)."""
    if isinstance(seed, np.random.Generator):
        seq = seed.bit_generator.seed_seq.spawn(n)
    elif isinstance(seed, np.random.SeedSequence):
        seq = seed.spawn(n)
    else:
        seq = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(s) for s in seq]


def kernel_seed(rng: np.random.Generator) -> int:
    """Integer seed handed to compiled kernels, drawn from ``rng``."""
    return int(rng.integers(0, 2**62))
