"""Counter-based random streams keyed by (seed, label path).

Every consumer of randomness asks for a named stream; the name is hashed to a
64-bit key so that adding or reordering consumers never shifts the numbers
another consumer sees.  Streams for the same (seed, labels) are identical
across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _mix(labels) -> int:
    h = hashlib.sha256()
    for label in labels:
        part = str(label).encode("utf-8")
        h.update(len(part).to_bytes(4, "little"))
        h.update(part)
    return int.from_bytes(h.digest()[:8], "little")


class Stream:
    """One independent random stream backed by a Philox counter generator."""

    def __init__(self, seed: int, *labels):
        self.seed = int(seed)
        self.labels = tuple(labels)
        key = (self.seed & 0xFFFFFFFFFFFFFFFF, _mix(self.labels))
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def fork(self, *labels) -> "Stream":
        """Derive a child stream; the parent's state is unaffected."""
        return Stream(self.seed, *self.labels, *labels)

    # Thin delegation; only the draws the codebase needs.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)
