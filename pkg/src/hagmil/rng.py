"""Seeded pseudo-random streams.

Every random draw in the package goes through :class:`Xoshiro256`, a
xoshiro256** generator whose 256-bit state is filled from a SplitMix64
sequence.  Doubles are ``(x >> 11) * 2**-53``; normals use the Box-Muller
transform on pairs of doubles (cosine branch first, then sine branch).
Identical seeds give identical sequences on every platform.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        out[i] = result


@njit(cache=True)
def _fill_normal(s, out):
    n = out.shape[0]
    buf = np.empty(2, dtype=np.uint64)
    i = 0
    while i < n:
        _fill_u64(s, buf)
        u1 = (buf[0] >> np.uint64(11)) * 1.1102230246251565e-16
        u2 = (buf[1] >> np.uint64(11)) * 1.1102230246251565e-16
        # u1 in (0, 1] keeps the log finite
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2


class Xoshiro256:
    """xoshiro256** stream seeded through SplitMix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        sm = self.seed
        words = []
        for _ in range(4):
            sm, z = splitmix64(sm)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    def spawn(self, stream: int) -> "Xoshiro256":
        """Independent child stream keyed by ``(seed, stream)``; parent state is untouched."""
        _, mixed = splitmix64((self.seed ^ ((int(stream) + 1) * 0xD1B54A32D192ED03)) & _MASK)
        return Xoshiro256(mixed)

    def fork(self) -> "Xoshiro256":
        """New stream seeded from this stream's next output (advances this stream)."""
        return Xoshiro256(int(self.next_u64(1)[0]))

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def random(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.float64)
        _fill_normal(self._s, out)
        return out

    def integers(self, high: int, n: int | None = None):
        """Uniform integers on [0, high) by multiply-shift on 53-bit doubles."""
        if high < 1:
            raise ValueError("high must be >= 1")
        k = 1 if n is None else n
        vals = np.floor(self.random(k) * high).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[pos] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def state(self) -> list[int]:
        return [int(x) for x in self._s]
