"""Counter-based SplitMix64 random stream with Box-Muller Gaussians.

Output word ``i`` (0-based) of a stream with key ``k`` is
``mix64(k + (i + 1) * GOLDEN)``, where ``mix64`` is the SplitMix64 finalizer.
This is exactly SplitMix64 started from state ``k``, but addressable by
counter, so vectorized draws are cheap and reproducible across languages.

Uniforms take the top 53 bits: ``(w >> 11) * 2**-53`` in [0, 1).
Gaussians use basic Box-Muller on consecutive uniform pairs ``(u1, u2)``::

    r = sqrt(-2 ln(1 - u1));  z0 = r cos(2 pi u2);  z1 = r sin(2 pi u2)

Substream ``j`` of a stream seeded with ``s`` has key
``mix64(s ^ mix64(j + SUBSTREAM_SALT))``.
"""
from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
SUBSTREAM_SALT = 0xD1B54A32D192ED03
_MASK = (1 << 64) - 1
_U64 = np.uint64


def mix64(z):
    """SplitMix64 finalizer; works on Python ints and uint64 arrays."""
    if isinstance(z, np.ndarray):
        z = z.astype(np.uint64, copy=True)
        z ^= z >> _U64(30)
        z *= _U64(0xBF58476D1CE4E5B9)
        z ^= z >> _U64(27)
        z *= _U64(0x94D049BB133111EB)
        z ^= z >> _U64(31)
        return z
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def box_muller(u1, u2):
    """Map uniform pairs in [0, 1) to two independent standard normals."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    return r * np.cos(theta), r * np.sin(theta)


class RngStream:
    algorithm = "splitmix64-counter"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def substream(self, index: int) -> RngStream:
        return RngStream(mix64(self.seed ^ mix64((int(index) + SUBSTREAM_SALT) & _MASK)))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            words = _U64(self.seed) + idx * _U64(GOLDEN)
        return mix64(words)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> _U64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def uniform_open(self, shape=()) -> np.ndarray:
        """Uniforms strictly inside (0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = ((self.next_u64(n) >> _U64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def gaussian(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        z0, z1 = box_muller(u[:, 0], u[:, 1])
        z = np.stack([z0, z1], axis=1).reshape(-1)[:n]
        return z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by floor(u * span); bias is below 2**-40 for small spans."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def rng_gaussian(stream: RngStream, shape):
    from diffad.numcore.tensor import Tensor

    return Tensor(stream.gaussian(shape))
