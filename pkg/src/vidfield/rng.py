"""PCG32 pseudo-random generator.

Small-state generator used everywhere randomness is needed (parameter
initialization, synthetic videos, batch sampling) so that every run is
reproducible from a single integer seed, independently of numpy's own
generator versioning.
"""

from __future__ import annotations

import math

import numpy as np

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1


class Pcg32:
    """32-bit PCG (XSH-RR variant) with 64-bit state.

    ``seed`` selects the stream position, ``seq`` the stream itself.
    """

    def __init__(self, seed: int, seq: int = 0):
        self.state = 0
        self.inc = ((seq << 1) | 1) & _MASK64
        self.next_u32()
        self.state = (self.state + seed) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * _MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def randint_below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by threshold rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (1 << 32) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def uniform(self) -> float:
        """Double in [0, 1)."""
        return self.next_u32() / 4294967296.0

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)

    def normals(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Standard-normal draws via Box-Muller, scaled by ``std``."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        out = np.empty(2 * pairs, dtype=np.float64)
        for i in range(pairs):
            u1 = (self.next_u32() + 1) / 4294967296.0  # (0, 1], keeps log finite
            u2 = self.next_u32() / 4294967296.0
            r = math.sqrt(-2.0 * math.log(u1))
            out[2 * i] = r * math.cos(2.0 * math.pi * u2)
            out[2 * i + 1] = r * math.sin(2.0 * math.pi * u2)
        return (std * out[:n]).reshape(shape).astype(dtype)
