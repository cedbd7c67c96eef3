"""Seed plumbing: independent, thread-order-insensitive random streams.

One master seed fans out to per-work-unit ``numpy`` generators through
``SeedSequence.spawn``; kernels receive a splitmix64 counter state drawn
from the owning generator.  Results therefore depend only on the unit
index, never on scheduling.
"""

from __future__ import annotations

import numpy as np


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, SeedSequence, int seed, or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def spawn_generators(seed, n: int) -> list:
    """n independent generators derived from one master seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(n)]


def kernel_state(rng: np.random.Generator) -> np.ndarray:
    """Fresh splitmix64 counter state for the numba kernels."""
    return rng.integers(0, 2**64, size=1, dtype=np.uint64)
