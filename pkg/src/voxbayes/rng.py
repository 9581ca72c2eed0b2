"""Counter-based random streams.

Every stream is a Philox generator keyed on ``(seed, index)``, so a child
stream never depends on how many draws its parent has made. This is what
lets MC forward passes and augmentation run in any order and still agree.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic random stream identified by a seed and a path of indices."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(np.random.Philox(key=self._key()))

    def _key(self) -> int:
        # fold the path into the high 64 key bits; seed occupies the low bits
        h = 0x9E3779B97F4A7C15
        for p in self.path:
            h = (h ^ (p + 1)) * 0xBF58476D1CE4E5B9 & _MASK64
            h ^= h >> 31
        return (h << 64) | self.seed

    def child(self, index: int) -> "Rng":
        """Independent stream for draw ``index`` under this stream."""
        return Rng(self.seed, self.path + (index,))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def rademacher(self, shape) -> np.ndarray:
        return np.where(self._gen.random(shape) < 0.5, -1.0, 1.0)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return (self._gen.random(shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
