"""Deterministic random numbers, identical across platforms and numpy builds.

Scalar draws come from xoshiro256** seeded through splitmix64, the usual
pairing.  Bulk array fills use splitmix64 in counter mode keyed by a fresh
word from the scalar stream, so a million-element fill costs one state
advance plus vectorised integer mixing instead of a Python loop.  Normals
are Box-Muller pairs with no cached leftover, which keeps the serialisable
state to exactly four 64-bit words.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def _splitmix64(x: int) -> int:
    x = (x + _GAMMA) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)), x


def _splitmix64_array(key: int, count: int) -> np.ndarray:
    """count splitmix64 outputs for states key + 1..count, vectorised."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    x = (np.uint64(key) + idx * np.uint64(_GAMMA)) & np.uint64(_MASK)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256** stream with splitmix64 seed expansion.

    state() / set_state() expose the four raw words so a training run can
    park its sampling stream inside a checkpoint and resume bit-exactly.
    """

    def __init__(self, seed: int):
        s = int(seed) & _MASK
        words = []
        for _ in range(4):
            out, s = _splitmix64(s)
            words.append(out)
        self._s = words

    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def set_state(self, words) -> None:
        words = [int(w) & _MASK for w in words]
        if len(words) != 4 or not any(words):
            raise InputError("rng state must be four 64-bit words, not all zero")
        self._s = words

    def u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """One double in [0, 1) from the top 53 bits."""
        return (self.u64() >> 11) * _INV_2_53

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise InputError(f"randint needs n >= 1, got {n}")
        limit = _MASK - (_MASK + 1) % n
        while True:
            u = self.u64()
            if u <= limit:
                return u % n

    def normal(self) -> float:
        """Single standard normal (consumes a Box-Muller pair)."""
        u1 = self.uniform()
        u2 = self.uniform()
        return float(np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2))

    def uniform_array(self, shape, dtype=np.float64) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = _splitmix64_array(self.u64(), count)
        u = (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape).astype(dtype, copy=False)

    def normal_array(self, shape, dtype=np.float64) -> np.ndarray:
        """Standard normals via Box-Muller on a counter-mode fill."""
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (count + 1) // 2
        bits = _splitmix64_array(self.u64(), 2 * pairs)
        u = (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return z.reshape(shape).astype(dtype, copy=False)

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates using the scalar stream."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]
