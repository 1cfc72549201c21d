"""Deterministic 64-bit PRNG used for weight initialization and dropout masks.

The generator is SplitMix64 (Steele, Lea & Flood's mix of the Weyl sequence),
chosen because it is tiny, well studied, and trivially reproducible in any
language. Normal deviates come from the Box-Muller transform. The algorithm is
fixed: the same seed yields the same stream forever, independent of numpy
version or platform. See README "Reproducibility" for the exact recurrence.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 stream with uniform and Gaussian draws."""

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1), 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def gaussian(self) -> float:
        """Standard normal deviate via Box-Muller; pairs are cached."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        # u1 in (0, 1] so that log(u1) is finite.
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def gaussians(self, n: int, std: float = 1.0) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.gaussian() * std
        return out

    def bernoulli_keep_mask(self, n: int, drop_p: float) -> np.ndarray:
        """Boolean mask with P(keep) = 1 - drop_p per entry."""
        out = np.empty(n, dtype=bool)
        for i in range(n):
            out[i] = self.uniform() >= drop_p
        return out
