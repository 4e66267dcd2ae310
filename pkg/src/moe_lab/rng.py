"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper around numpy's
Philox4x64 counter-based generator.  A stream is identified by ``(seed,
stream)``; the pair is packed into the 128-bit Philox key as
``seed + stream * 2**64`` so distinct streams never overlap and the same
``(seed, stream, draw count)`` reproduces the same numbers on any platform.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import UsageError

_U64 = 1 << 64


def stream_id(name: str) -> int:
    """Stable 32-bit stream number for a textual stream name."""
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    algorithm = "philox4x64"

    def __init__(self, seed: int, stream: int | str = 0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        if not (0 <= seed < _U64 and 0 <= stream < _U64):
            raise UsageError(f"seed and stream must be unsigned 64-bit, got {seed}, {stream}")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed + self.stream * _U64))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, stream: int | str) -> "Rng":
        """Independent stream sharing this generator's seed."""
        if isinstance(stream, str):
            stream = stream_id(stream)
        return Rng(self.seed, (self.stream * 1_000_003 + int(stream) + 1) % _U64)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low, high, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def rademacher(self, shape) -> np.ndarray:
        return np.where(self._gen.integers(0, 2, shape) == 1, 1.0, -1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)
