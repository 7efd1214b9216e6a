"""Portable RNG for reproducible pair permutations.

The allocation step must produce the same permutations bit-for-bit in any
implementation, so the generator is pinned to named public algorithms rather
than a library default: a 64-bit seed is expanded with splitmix64 into the
256-bit state of xoshiro256**, and permutations are drawn with a backward
Fisher-Yates shuffle using modulo reduction.
"""

from __future__ import annotations

_MASK64 = 0xFFFFFFFFFFFFFFFF

PRNG_ID = "splitmix64/xoshiro256starstar/fisher-yates-mod"


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** with splitmix64 seed expansion."""

    def __init__(self, seed: int):
        sm = seed & _MASK64
        state = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            state.append(out)
        self._s = state

    @classmethod
    def from_state(cls, s0: int, s1: int, s2: int, s3: int) -> "Xoshiro256StarStar":
        rng = cls.__new__(cls)
        rng._s = [s0 & _MASK64, s1 & _MASK64, s2 & _MASK64, s3 & _MASK64]
        return rng

    def next_uint64(self) -> int:
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

    def next_below(self, n: int) -> int:
        """Uniform draw in [0, n) by modulo reduction (bias < 2**-60 for desk-scale n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_uint64() % n


def permutation(n: int, seed: int) -> list[int]:
    """Deterministic permutation of range(n) for a 64-bit seed.

    Backward Fisher-Yates: for i = n-1 .. 1, swap a[i] with a[j],
    j = next_uint64() % (i + 1).
    """
    rng = Xoshiro256StarStar(seed)
    out = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out
