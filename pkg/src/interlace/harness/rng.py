"""Counter-based random field indexed by vertices.

Every random draw in the package is a pure function of
``(master seed, vertex key, lane, index)``.  The mixing function is the
Philox4x32-10 block cipher: the 64-bit master seed is the cipher key and
the four counter words carry the vertex key (two words), the lane and the
index.  Because nothing is sequential, results do not depend on the order
in which vertices are visited or on how replicas are distributed, and a
field shifted by a lattice translation is obtained by shifting keys.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numba as nb
import numpy as np

__all__ = [
    "RandomField",
    "lane_id",
    "sublane",
    "mix64",
    "mix64_py",
    "philox4x32",
    "philox_uniform",
    "poisson_from_uniform",
]

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_S32 = np.uint64(32)
_S5 = np.uint64(5)
_S6 = np.uint64(6)
_TWO26 = 67108864.0
_TWO53 = 9007199254740992.0

_PY_MASK64 = (1 << 64) - 1


@nb.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x32 on 32-bit words held in uint64 values."""
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK32
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def philox_uniform(key, lane, index, k0, k1):
    """A double in the open interval (0, 1) for one counter value."""
    o0, o1, _, _ = philox4x32(
        key & _MASK32, key >> _S32, np.uint64(lane) & _MASK32,
        np.uint64(index) & _MASK32, k0, k1,
    )
    a = (o0 >> _S5) * _TWO26
    b = o1 >> _S6
    return (a + b + 0.5) / _TWO53


@nb.njit(cache=True)
def _uniform_array(keys, lanes, index, k0, k1, shift):
    out = np.empty(keys.shape[0], dtype=np.float64)
    for i in range(keys.shape[0]):
        out[i] = philox_uniform(keys[i] - shift, lanes[i], index[i], k0, k1)
    return out


@nb.njit(cache=True, inline="always")
def mix64(a, b):
    """Hash two 64-bit words into one (SplitMix64 finaliser on a ^ f(b))."""
    z = a ^ ((b + np.uint64(0x9E3779B97F4A7C15)) * np.uint64(0xBF58476D1CE4E5B9))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64_py(a: int, b: int) -> int:
    """Pure-Python twin of :func:`mix64`, used for scalar vertex keys."""
    z = (a ^ (((b + 0x9E3779B97F4A7C15) & _PY_MASK64) * 0xBF58476D1CE4E5B9)) & _PY_MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _PY_MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _PY_MASK64
    return z ^ (z >> 31)


@nb.njit(cache=True, inline="always")
def poisson_from_uniform(u, rate):
    """Inverse-CDF Poisson draw; deterministic in the uniform ``u``."""
    if rate <= 0.0:
        return 0
    k = 0
    p = np.exp(-rate)
    cdf = p
    while u > cdf and k < 100000:
        k += 1
        p *= rate / k
        cdf += p
        if p < 1e-300 and cdf >= 1.0 - 1e-16:
            break
    return k


def lane_id(tag: str) -> int:
    """Stable 32-bit lane number for a string tag."""
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


def sublane(lane: int, j) -> np.ndarray | int:
    """Lane for the ``j``-th member sharing a vertex (``j = 0`` keeps ``lane``)."""
    j = np.asarray(j, dtype=np.uint64)
    out = (np.uint64(lane) ^ ((j * np.uint64(0x9E3779B1)) & _MASK32)) & _MASK32
    return out if out.ndim else int(out)


@dataclass(frozen=True)
class RandomField:
    """Deterministic i.i.d. uniforms attached to vertices.

    ``uniform(keys, lane, index)`` evaluates the field at vertex keys.
    ``shift`` is subtracted from every key before hashing; for lattice
    families keys are coordinate codes, so ``shifted(code(g))`` is the
    field translated by ``g``: its value at ``x + g`` equals the original
    value at ``x``.
    """

    seed: int
    shift: int = 0

    @property
    def words(self) -> tuple[np.uint64, np.uint64]:
        s = mix64_py(self.seed & _PY_MASK64, 0x5EED)
        return np.uint64(s & 0xFFFFFFFF), np.uint64(s >> 32)

    @property
    def shift_u64(self) -> np.uint64:
        return np.uint64(self.shift & _PY_MASK64)

    def replica(self, r: int) -> "RandomField":
        """An independent field for replica ``r`` (same shift)."""
        return RandomField(mix64_py(self.seed & _PY_MASK64, 0xA5A5_0000 + int(r)), self.shift)

    def shifted(self, delta: int) -> "RandomField":
        return RandomField(self.seed, self.shift + int(delta))

    def uniform(self, keys, lane, index=0) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.uint64)
        shape = np.broadcast_shapes(keys.shape, np.shape(lane), np.shape(index))
        k = np.broadcast_to(keys, shape).ravel()
        ln = np.broadcast_to(np.asarray(lane, dtype=np.uint64), shape).ravel()
        ix = np.broadcast_to(np.asarray(index, dtype=np.uint64), shape).ravel()
        k0, k1 = self.words
        return _uniform_array(k, ln, ix, k0, k1, self.shift_u64).reshape(shape)

    def exponential(self, keys, lane, index=0) -> np.ndarray:
        return -np.log(self.uniform(keys, lane, index))

    def poisson(self, keys, lane, rate: float, index=0) -> np.ndarray:
        u = self.uniform(keys, lane, index)
        return _poisson_array(u.ravel(), float(rate)).reshape(u.shape)


@nb.njit(cache=True)
def _poisson_array(u, rate):
    out = np.empty(u.shape[0], dtype=np.int64)
    for i in range(u.shape[0]):
        out[i] = poisson_from_uniform(u[i], rate)
    return out
