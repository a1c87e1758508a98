"""Deterministic, portable random number generation.

Every stochastic choice in the package flows through a splitmix64-seeded
xoshiro256** stream, so runs are bit-reproducible from a single integer
seed and the streams are specifiable exactly in any language with 64-bit
integer arithmetic.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 output scrambler (Stafford variant 13)."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (value, next_state)."""
    state = (state + _GOLDEN) & _MASK64
    return _mix64(state), state


def derive_seed(*parts: int) -> int:
    """Fold integer components into one 64-bit seed.

    Used to carve independent substreams out of a run seed, e.g.
    derive_seed(run_seed, TAG_SLIDE, slide_index).
    """
    s = _GOLDEN
    for p in parts:
        s = _mix64((s ^ (p & _MASK64)) & _MASK64)
    return s


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256(object):
    """xoshiro256** stream, seeded through splitmix64.

    Single-threaded use only; each consumer owns its own stream.
    """

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            value, state = splitmix64(state)
            s.append(value)
        self._s = s
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Integer in [0, n) via 53-bit fixed-point scaling."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        return ((self.next_u64() >> 11) * n) >> 53

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both ends inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Gaussian draw via Box-Muller; pairs are cached."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
        else:
            u1 = 1.0 - self.random()  # (0, 1]; keeps log finite
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            z = r * math.cos(2.0 * math.pi * u2)
            self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * z

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order
