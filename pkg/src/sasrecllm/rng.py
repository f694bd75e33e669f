"""Deterministic random streams built on splitmix64.

Every random draw in the library goes through an RngStream so that a run is
fully determined by its seed, independent of platform, numpy version, or call
interleaving in unrelated code. The core generator is splitmix64 (Steele,
Lea & Flood 2014): a 64-bit counter advanced by a golden-ratio increment and
finalized with an avalanche mix. It is stateless per draw, which lets us
vectorize draws over numpy uint64 arrays.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53_INV = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wraps mod 2^64)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> np.uint64:
    """FNV-1a hash of a UTF-8 string, for deriving child-stream seeds."""
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for byte in text.encode("utf-8"):
        h = (h ^ np.uint64(byte)) * prime
    return h


class RngStream:
    """A named, seekable stream of pseudo-random numbers.

    Identical (seed, call sequence) produces bit-identical draws everywhere.
    Streams are cheap; derive one per purpose via :meth:`spawn` so that adding
    a consumer never perturbs the draws seen by another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = np.uint64(self.seed)

    def spawn(self, tag: str) -> "RngStream":
        """Child stream whose seed is a pure function of (seed, tag)."""
        with np.errstate(over="ignore"):
            child = _mix64(np.uint64(self.seed) ^ _fnv1a(tag))
        return RngStream(int(child))

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 words."""
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
            out = _mix64(self._counter + idx)
            self._counter = self._counter + np.uint64(n) * _GOLDEN
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform [0, 1) doubles with 53 random bits each."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        vals = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53_INV
        return vals.reshape(shape) if shape else float(vals[0])

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller on uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 in (0, 1] so log never sees zero
        u1 = ((self._raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * _U53_INV
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * _U53_INV
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        vals = mean + std * vals
        return vals.reshape(shape) if shape else float(vals[0])

    def randint(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Modulo bias is < 2^-40 for desk-scale ranges."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        vals = (self._raw(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniform keys)."""
        keys = self.uniform((n,)) if n else np.zeros(0)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """size draws with replacement from range(n)."""
        return self.randint(0, n, (size,))
