"""SplitMix64, written out so seeded streams are reproducible in any language.

The stream is counter based: draw ``i`` (0-based) of seed ``s`` is
``mix(s + (i + 1) * GAMMA)`` modulo 2**64. That makes the scalar generator and
the numpy block generator produce the exact same numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *labels: object) -> int:
    """Independent child seed for a named sub-stream."""
    h = hashlib.sha256(repr((seed & MASK64, labels)).encode()).digest()
    return int.from_bytes(h[:8], "little")


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.position = 0

    def next_u64(self) -> int:
        self.position += 1
        return mix64((self.seed + self.position * GAMMA) & MASK64)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def randbelow(self, n: int) -> int:
        if n < 1:
            raise ValueError("n must be >= 1")
        return min(int(self.random() * n), n - 1)

    def block(self, count: int) -> np.ndarray:
        """The next ``count`` uniforms as a float64 array (advances the stream)."""
        idx = np.arange(self.position + 1, self.position + 1 + count, dtype=np.uint64)
        self.position += count
        z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53
