"""Counter-based random streams on top of numpy's Philox4x64 bit generator.

A stream is addressed by ``(seed, stream, counter)``: the seed is the Philox
key, the stream id occupies the top counter word and ``counter`` the bottom
one, so sibling streams never share a Philox block. Gaussians use Box-Muller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    # splitmix64 finalizer: a bijection on 64-bit integers
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class Rng:
    seed: int
    counter: int = 0
    stream: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter)
        self.stream = int(self.stream) & _MASK64

    def split(self, index: int) -> "Rng":
        """Child stream ``index``; distinct indices give disjoint streams."""
        child = _mix64(self.stream + (int(index) + 1) * _GOLDEN)
        return Rng(self.seed, 0, child)

    def state(self) -> tuple[int, int, int]:
        return self.seed, self.counter, self.stream

    def _raw(self, n: int) -> np.ndarray:
        blocks = (n + 3) // 4
        bg = np.random.Philox(counter=[self.counter, 0, 0, self.stream], key=[self.seed, 0])
        raw = bg.random_raw(blocks * 4)
        self.counter += blocks
        return raw[:n]

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Uniform draws in ``[low, high)``."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape).astype(dtype)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / (1 << 53))  # (0, 1]
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape, dtype=np.float64)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def choice(self, options, shape=()):
        idx = self.integers(0, len(options), shape)
        if np.ndim(idx) == 0:
            return options[int(idx)]
        return [options[int(i)] for i in np.asarray(idx).reshape(-1)]

    def permutation(self, n: int) -> np.ndarray:
        # argsort of uniform keys; ties have probability ~2^-53
        return np.argsort(self.uniform((n,), dtype=np.float64), kind="stable")

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self.uniform(shape, dtype=np.float64) < p
