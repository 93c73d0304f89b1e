"""Counter-based random streams.

A stream is keyed by a tuple such as ``(seed, "sample", scene_id, candidate)``.
The key is hashed to 128 bits and drives a Philox4x32 counter generator, so a
stream's draws depend only on its key and how many values were taken from it,
never on which process or in which order other streams were consumed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings to a 128-bit integer key."""
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        token = repr(part).encode()
        h.update(len(token).to_bytes(4, "little"))
        h.update(token)
    return int.from_bytes(h.digest(), "little")


class Stream:
    """Deterministic stream of uniforms and normals for one key tuple."""

    def __init__(self, *parts):
        self.key = derive_key(*parts)
        self._bitgen = np.random.Philox(key=self.key)
        self._gen = np.random.Generator(self._bitgen)
        self.counter = 0  # number of uniforms drawn so far

    def uniform(self, size=None):
        """Uniform draw(s) in [0, 1)."""
        out = self._gen.random(size)
        self.counter += 1 if size is None else int(np.prod(size))
        return out

    def normal(self, size=None):
        """Standard normal draw(s) by Box-Muller over pairs of uniforms."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int) -> int:
        """Integer uniformly in [low, high)."""
        return int(low + np.floor(self.uniform() * (high - low)))

    def uniform_range(self, low: float, high: float) -> float:
        return float(low + (high - low) * self.uniform())

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) via argsort of uniforms."""
        return np.argsort(self.uniform(n), kind="stable")
