"""Counter-based random number streams for reproducible experiments.

Every source of randomness in the package draws from an RngStream. A
stream is addressed by the triple (seed, stream id, counter): each draw
consumes one counter tick and is produced by a Philox generator keyed by
(seed, stream id) at that counter, so any draw can be reproduced from the
triple alone and streams with distinct ids never overlap.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


def _mix_tag(parent_stream: int, tag) -> int:
    """Derive a child stream id, stable across platforms and sessions."""
    data = parent_stream.to_bytes(8, "little") + str(tag).encode("utf-8")
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


class RngStream:
    """Splittable, jumpable random stream backed by Philox-4x64.

    Each draw uses a disjoint 2^64-block of the 256-bit Philox counter
    space, so a stream can be resumed at any draw index in O(1).
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _U64
        self.stream = int(stream) & _U64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def substream(self, tag) -> "RngStream":
        """Independent child stream derived from a label (str or int)."""
        return RngStream(self.seed, _mix_tag(self.stream, tag))

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream, self.counter)

    def _next_generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        bg = np.random.Philox(counter=self.counter << 64, key=key)
        self.counter += 1
        return np.random.Generator(bg)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard-normal draw of the given shape."""
        return self._next_generator().standard_normal(shape, dtype=dtype)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draw on [0, 1)."""
        return self._next_generator().random(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._next_generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order randomized."""
        return self._next_generator().permutation(n)[:k]
