"""splitmix64 random stream shared by initialisation, data and shuffling.

The integer stream is bit-exact everywhere.  Reals are ``(x >> 11) * 2**-53``
and normals come from Box-Muller on consecutive pairs.  Because splitmix64
is counter based, blocks of draws are produced with vectorised uint64
arithmetic.
"""
from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64(state: int) -> tuple[int, int]:
    """One scalar step: returns (new_state, output)."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SeededRng:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def derive(self, index: int) -> "SeededRng":
        """Independent substream keyed by ``seed xor index`` (one splitmix64 step)."""
        _, out = splitmix64(self.state ^ (int(index) & MASK64))
        return SeededRng(out)

    def integers(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
            states = np.uint64(self.state) + steps
            out = _mix(states)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def uniform(self, n: int | None = None):
        """Reals in [0, 1); a float when ``n`` is None, else an array."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0 ** -53
        return (self.integers(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = min(int(self.uniform() * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
