"""Seedable, platform-independent random numbers.

SplitMix64 (Steele, Lea & Flood 2014): a 64-bit-state generator whose
entire algorithm fits in a dozen lines, so every stream in this package
is reproducible bit-for-bit from its integer seed, independent of numpy
version or platform.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(base: int, *keys: int) -> int:
    """Deterministically fold integer keys into a base seed.

    Used to hand out independent child streams, e.g. one per
    (training step, sample index).
    """
    s = base & _MASK
    for k in keys:
        s = _mix(((s + _GAMMA) ^ (k & _MASK)) & _MASK)
    return s


class SplitMix64:
    """Minimal RNG: 64-bit counter state advanced by a fixed gamma."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix(self.state)

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def uniform_array(self, n: int) -> "np.ndarray":
        """n uniforms at once; the state is counter-based, so this is the
        exact same stream ``uniform`` would produce, computed vectorized."""
        states = (np.uint64(self.state)
                  + np.uint64(_GAMMA) * np.arange(1, n + 1, dtype=np.uint64))
        self.state = int(states[-1]) if n else self.state
        z = states
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        bound = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < bound:
                return u % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), order random."""
        if k > n:
            raise ValueError("sample size exceeds population")
        idx = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]

    def choice(self, items):
        return items[self.randint(len(items))]
