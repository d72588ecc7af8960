"""Deterministic counter-based random streams.

Algorithm (normative for reproducibility): a stream is keyed by folding its
seed parts (64-bit ints and/or strings) into a single 64-bit key, strings via
FNV-1a. Draw ``i`` of a stream is ``splitmix64_mix(key + (i+1) * GAMMA)``
where GAMMA is the splitmix64 increment and ``mix`` its finalizer. Streams
are therefore pure functions of their key parts: they can be re-derived at
any point, consumed in any order, and never share state.

Uniform doubles use the top 53 bits of a draw. Poisson sampling uses Knuth's
product-of-uniforms method and is intended for small means (lambda < ~40).
"""

from __future__ import annotations

import math

_M64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    """splitmix64 finalizer."""
    z &= _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def _fnv1a(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _M64
    return h


def derive_key(*parts: int | str) -> int:
    """Fold seed parts into a 64-bit stream key."""
    h = 0x6A09E667F3BCC909
    for part in parts:
        v = _fnv1a(part) if isinstance(part, str) else part & _M64
        h = _mix((h ^ v) + _GAMMA)
    return h


class Rng:
    """A counter-based stream; state is just (key, counter)."""

    __slots__ = ("key", "counter")

    def __init__(self, *parts: int | str):
        self.key = derive_key(*parts)
        self.counter = 0

    @classmethod
    def from_state(cls, key: int, counter: int) -> "Rng":
        rng = cls.__new__(cls)
        rng.key = key & _M64
        rng.counter = counter
        return rng

    def split(self, *parts: int | str) -> "Rng":
        """Derive an independent substream without consuming this one."""
        return Rng(self.key, *parts)

    def u64(self) -> int:
        self.counter += 1
        return _mix((self.key + self.counter * _GAMMA) & _M64)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.u64() >> 11) * (1.0 / (1 << 53))  # [0, 1)
        return low + (high - low) * u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        limit = (_M64 + 1) - ((_M64 + 1) % n)
        while True:
            v = self.u64()
            if v < limit:
                return v % n

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def normal(self) -> float:
        """Standard normal via Box-Muller (two uniforms per draw)."""
        u1 = self.uniform()
        u2 = self.uniform()
        while u1 <= 1e-300:
            u1 = self.uniform()
            u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def poisson(self, lam: float) -> int:
        """Knuth's method; valid for small lambda."""
        if lam <= 0.0:
            return 0
        if lam > 60.0:
            raise ValueError("poisson: lambda too large for Knuth sampling")
        threshold = math.exp(-lam)
        k = 0
        p = 1.0
        while True:
            p *= self.uniform()
            if p <= threshold:
                return k
            k += 1
