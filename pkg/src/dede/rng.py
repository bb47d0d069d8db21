"""Counter-based deterministic random streams.

Every draw is keyed by ``(seed, stream, counter)``, so outputs never depend on
how work is split across workers, only on which stream a task was assigned.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_id(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class Rng:
    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def child(self, name: str) -> "Rng":
        """Independent stream derived from this one's seed, stream and ``name``."""
        return Rng(self.seed, stream_id(f"{self.stream}/{name}"), 0)

    def _generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, self.stream, self.counter])
        self.counter += 1
        return np.random.Generator(np.random.PCG64(ss))

    def uniform01(self, shape=()) -> np.ndarray:
        return self._generator().random(shape)

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def subset(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, sorted ascending."""
        if k < 0 or k > n:
            raise ValueError(f"subset needs 0 <= k <= n, got n={n}, k={k}")
        return np.sort(self._generator().permutation(n)[:k])

    def subsets(self, count: int, n: int, k: int) -> np.ndarray:
        """``count`` independent uniform ``k``-subsets of ``range(n)`` as a (count, k) array."""
        if k < 0 or k > n:
            raise ValueError(f"subset needs 0 <= k <= n, got n={n}, k={k}")
        keys = self._generator().random((count, n))
        return np.sort(np.argsort(keys, axis=1, kind="stable")[:, :k], axis=1)

    def draw(self, kind: str, *args):
        if kind == "uniform01":
            return self.uniform01(*args)
        if kind == "standard_normal":
            return self.standard_normal(*args)
        if kind == "permutation":
            return self.permutation(*args)
        if kind == "subset":
            return self.subset(*args)
        raise ValueError(f"unknown draw kind {kind!r}")
