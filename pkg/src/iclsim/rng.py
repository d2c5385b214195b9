"""Counter-based splittable random streams on top of numpy's Philox generator."""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(seed: int, path: tuple) -> np.ndarray:
    """Hash (seed, path) into the two 64-bit words that key a Philox stream."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        raw = part.encode("utf-8") if isinstance(part, str) else int(part).to_bytes(8, "little", signed=True)
        h.update(len(raw).to_bytes(2, "little"))
        h.update(raw)
    digest = h.digest()
    words = np.frombuffer(digest[:16], dtype=np.uint64)
    return words.copy()


class SplitRng:
    """One named stream of randomness.

    Same (seed, path) always yields the same draw sequence; streams with
    different paths are statistically independent, so subsystems can pull
    randomness without coordinating draw order.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.path = tuple(path)
        self.gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def split(self, *labels) -> "SplitRng":
        """Child stream named by appending labels (strings or ints) to this path."""
        if not labels:
            raise ValueError("split needs at least one label")
        return SplitRng(self.seed, self.path + labels)

    # passthroughs for the handful of draw shapes the codebase uses
    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None, dtype=np.float64):
        return self.gen.random(size=size, dtype=dtype)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size=size)

    def permutation(self, x):
        return self.gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def shuffle(self, x) -> None:
        self.gen.shuffle(x)

    def __repr__(self) -> str:
        return f"SplitRng(seed={self.seed}, path={self.path!r})"
