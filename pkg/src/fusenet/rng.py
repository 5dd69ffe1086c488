"""Portable seeded random stream.

The generator is SplitMix64 (Steele, Lea & Flood, 2014). Its state is a
single 64-bit counter; output ``i`` after state ``s`` is::

    z = s + i * 0x9E3779B97F4A7C15            (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    out = z ^ (z >> 31)

Because the recurrence is counter based, a block of ``n`` outputs can be
computed with vectorized unsigned arithmetic and still be bit-identical to
drawing them one at a time. Uniform doubles use the top 53 bits.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0**-53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix_seed(*parts: int) -> int:
    """Derive a child seed from a tuple of integers (e.g. ``(seed, epoch)``)."""
    state = 0
    for part in parts:
        z = np.array([(state + (int(part) & _MASK) * _GAMMA + _GAMMA) & _MASK], dtype=np.uint64)
        state = int(_mix(z)[0])
    return state


class Rng:
    """SplitMix64 stream with explicit state."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.state = self.seed

    def __repr__(self):
        return f"Rng(seed={self.seed}, state={self.state})"

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
        self.state = (self.state + n * _GAMMA) & _MASK
        return _mix(z)

    def random(self, shape=()) -> np.ndarray:
        """Uniform float64 samples in [0, 1)."""
        size = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(size) >> np.uint64(11)
        return (bits.astype(np.float64) * _TWO_M53).reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Box-Muller standard normals."""
        size = int(np.prod(shape, dtype=np.int64))
        u = self.random(2 * size).reshape(2, size)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        return (r * np.cos(2.0 * np.pi * u[1])).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers uniform on [0, high)."""
        return np.floor(self.random(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, drawing j in [0, i] for i = n-1 .. 1."""
        idx = np.arange(n, dtype=np.int64)
        if n < 2:
            return idx
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def spawn(self, key: int) -> "Rng":
        return Rng(mix_seed(self.seed, key))
