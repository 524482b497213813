"""Random number streams.

Weight initialization uses xorshift64*: state update
``x ^= x >> 12; x ^= x << 25; x ^= x >> 27`` and output
``x * 0x2545F4914F6CDD1D mod 2**64``, seeded through splitmix64 so that any
integer seed (including 0) gives a non-zero state. Uniform doubles take the
top 53 bits of each output.

Everything else (shuffles, attack starts, bootstrap) draws from numpy's
PCG64 keyed by a tuple of integers, so a stream depends only on its key
and not on how many other streams were consumed before it.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
XORSHIFT_MULT = 0x2545F4914F6CDD1D


def splitmix64(seed: int) -> int:
    z = (seed + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        state = splitmix64(int(seed) & MASK64)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * XORSHIFT_MULT) & MASK64

    def uniform(self, size: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """``size`` doubles in ``[lo, hi)``."""
        u = np.array([(self.next_u64() >> 11) * (1.0 / (1 << 53)) for _ in range(size)])
        return lo + (hi - lo) * u


def stream(*key: int) -> np.random.Generator:
    """Independent generator for an integer key such as ``(seed, sample, restart)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) & MASK64 for k in key])))


def uniform_rows(key: tuple[int, ...], indices, width: int, lo: float, hi: float) -> np.ndarray:
    """One row of uniforms per sample index, each from its own keyed stream."""
    return np.stack([stream(*key, int(i)).uniform(lo, hi, size=width) for i in indices]) if len(indices) else np.empty((0, width))
