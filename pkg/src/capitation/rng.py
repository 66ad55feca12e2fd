"""Counter-based random numbers for reproducible synthetic fixtures.

The generator is SplitMix64 evaluated at explicit counters. A stream is
identified by a 64-bit key; the ``n``-th output of the stream is

    mix64(key + n * GAMMA)            for n = 1, 2, 3, ...

with

    GAMMA = 0x9E3779B97F4A7C15
    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

all arithmetic modulo 2**64. The key of the root stream is ``mix64(seed)``.
A child stream labelled ``p`` has key ``mix64(parent_key ^ label(p))`` where
``label`` is the integer itself for ints and the little-endian value of the
8-byte BLAKE2b digest of the UTF-8 text for strings. Because every output
is a pure function of (key, counter), substreams can be drawn in any order
and in parallel without changing results.

Uniforms take the top 53 bits: ``(x >> 11) * 2**-53``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_U64_GAMMA = np.uint64(GAMMA)
_U64_MIX1 = np.uint64(MIX1)
_U64_MIX2 = np.uint64(MIX2)


def mix64_int(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _U64_MIX1
        z = (z ^ (z >> np.uint64(27))) * _U64_MIX2
    return z ^ (z >> np.uint64(31))


def _label(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("stream labels must be int or str")
    if isinstance(part, (int, np.integer)):
        return int(part) & MASK64
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported stream label {part!r}")


class CounterRNG:
    """A keyed SplitMix64 stream with an internal draw counter.

    ``spawn`` derives an independent child stream from the key alone, so a
    child's output does not depend on how many values the parent has drawn.
    """

    def __init__(self, seed: int, *path):
        key = mix64_int(_label(seed))
        for part in path:
            key = mix64_int(key ^ _label(part))
        self.key = key
        self.counter = 0

    @classmethod
    def _from_key(cls, key: int) -> "CounterRNG":
        obj = cls.__new__(cls)
        obj.key = key
        obj.counter = 0
        return obj

    def spawn(self, *path) -> "CounterRNG":
        key = self.key
        for part in path:
            key = mix64_int(key ^ _label(part))
        return CounterRNG._from_key(key)

    def bits(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        n = int(n)
        counters = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.key) + counters * _U64_GAMMA
        return mix64(state)

    def uniform(self, size) -> np.ndarray:
        """Uniform doubles on [0, 1)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = math.prod(shape)
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def normal(self, size, loc=0.0, scale=1.0) -> np.ndarray:
        """Standard normals by the Box-Muller cosine branch (two uniforms each)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = math.prod(shape)
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]
        u2 = u[n:]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (loc + scale * z).reshape(shape)

    def integers(self, low: int, high, size) -> np.ndarray:
        """Integers on [low, high); ``high`` may be an array."""
        u = self.uniform(size)
        span = np.asarray(high, dtype=np.int64) - low
        return (low + np.floor(u * span)).astype(np.int64)

    def bernoulli(self, p, size) -> np.ndarray:
        return self.uniform(size) < p

    def choice(self, weights, size) -> np.ndarray:
        """Indices drawn with probability proportional to ``weights``."""
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, self.uniform(size), side="right")
        return np.minimum(idx, len(w) - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if k > n:
            raise ValueError("sample larger than population")
        return self.permutation(n)[:k]

    def lognormal(self, median: float, sigma: float, size) -> np.ndarray:
        return median * np.exp(sigma * self.normal(size))

    def poisson(self, lam) -> np.ndarray:
        """Poisson counts; inversion below 30, rounded normal approximation above.

        Every element consumes one uniform and one normal regardless of branch,
        so the stream position depends only on the array size.
        """
        lam = np.asarray(lam, dtype=np.float64)
        shape = lam.shape
        flat = lam.ravel()
        n = flat.size
        u = self.uniform(n)
        z = self.normal(n)
        out = np.zeros(n, dtype=np.int64)

        big = flat >= 30.0
        out[big] = np.maximum(0, np.floor(flat[big] + np.sqrt(flat[big]) * z[big] + 0.5))

        small = np.flatnonzero(~big & (flat > 0))
        if small.size:
            lam_s = flat[small]
            p = np.exp(-lam_s)
            cdf = p.copy()
            k = np.zeros(small.size, dtype=np.int64)
            active = u[small] > cdf
            step = 0
            while active.any() and step < 200:
                step += 1
                k[active] += 1
                p[active] *= lam_s[active] / k[active]
                cdf[active] += p[active]
                active &= u[small] > cdf
            out[small] = k
        return out.reshape(shape)
