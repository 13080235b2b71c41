"""Random-walk kernels, path and bridge samplers, heat-kernel profiles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba as nb
import numpy as np

from .graph import Grandparent, Lattice, RegularTree
from .harness.rng import RandomField, philox_uniform
from .space import TreeSpace, tree_neighbor

__all__ = [
    "Stream",
    "KernelField",
    "kernel_field",
    "sample_srw",
    "sample_bridge",
    "heat_kernel_profile",
    "HeatProfile",
    "tree_distance_profile",
    "lattice_octant_profiles",
    "LatticeKernelTable",
    "walk_paths",
]

MAX_ENTRIES = 50_000_000


@dataclass(frozen=True)
class Stream:
    """A single lane of the random field at one vertex key."""

    field: RandomField
    key: int
    lane: int

    def uniforms(self, n: int, start: int = 0) -> np.ndarray:
        return self.field.uniform(np.uint64(self.key), self.lane, np.arange(start, start + n, dtype=np.uint64))


# ----------------------------------------------------------------------
# exact kernels


def tree_distance_profile(d: int, n_max: int) -> np.ndarray:
    """``q[n, k] = P(dist(X_n, X_0) = k)`` for simple random walk on the d-regular tree."""
    q = np.zeros((n_max + 1, n_max + 2))
    q[0, 0] = 1.0
    up = (d - 1) / d
    for n in range(n_max):
        q[n + 1, 1] += q[n, 0]
        q[n + 1, 2:n + 2] += up * q[n, 1:n + 1]
        q[n + 1, 0:n] += (1 - up) * q[n, 1:n + 1]
    return q[:, : n_max + 1]


def tree_sphere_sizes(d: int, k_max: int) -> np.ndarray:
    s = np.ones(k_max + 1)
    if k_max >= 1:
        s[1:] = d * (d - 1.0) ** np.arange(k_max)
    return s


def _renormalise(arr: np.ndarray, mass: float, what: str) -> np.ndarray:
    drift = abs(mass - 1.0)
    if drift >= 1e-12:
        raise AssertionError(f"{what}: stochasticity drift {drift:.3e} exceeds 1e-12")
    return arr / mass


def lattice_octant_profiles(d: int, n_max: int, keep: bool = False, full: bool = False):
    """Dynamic programme for ``p_n(o, z)`` on Z^d over the positive orthant.

    By the reflection symmetries only ``z >= 0`` (componentwise) is stored.
    The array for step ``n`` is truncated at sup-radius
    ``min(n, ceil(9 sqrt(n/d)) + 6)`` (everything if ``full``); the mass
    lost is part of the drift that must stay below 1e-12.

    Returns the return probabilities ``p_n(o, o)`` and, if ``keep``, the
    list of orthant arrays.
    """

    def radius(n):
        return n if full else min(n, int(math.ceil(9.0 * math.sqrt(n / d))) + 6)

    f = np.ones((1,) * d)
    ret = np.zeros(n_max + 1)
    ret[0] = 1.0
    kept = [f] if keep else None
    for n in range(1, n_max + 1):
        s_new = radius(n) + 1
        s_old = f.shape[0]
        pad = np.zeros((s_new + 2,) * d)
        m = min(s_old, s_new + 1)
        pad[(slice(1, 1 + m),) * d] = f[(slice(0, m),) * d]
        for ax in range(d):
            src = [slice(None)] * d
            dst = [slice(None)] * d
            src[ax], dst[ax] = 2, 0
            pad[tuple(dst)] = pad[tuple(src)]
        g = np.zeros((s_new,) * d)
        for ax in range(d):
            hi = [slice(1, s_new + 1)] * d
            lo = [slice(1, s_new + 1)] * d
            hi[ax] = slice(2, s_new + 2)
            lo[ax] = slice(0, s_new)
            g += pad[tuple(hi)] + pad[tuple(lo)]
        g /= 2 * d
        g = _renormalise(g, _orthant_mass(g), f"lattice kernel step {n}")
        f = g
        ret[n] = f[(0,) * d]
        if keep:
            kept.append(f)
    return ret, kept


def _orthant_mass(g: np.ndarray) -> float:
    d = g.ndim
    w = np.ones(g.shape[0]) * 2.0
    w[0] = 1.0
    tot = g
    for _ in range(d):
        tot = np.tensordot(tot, w, axes=([0], [0]))
    return float(tot)


class KernelField:
    """Table of ``p_n(., y)`` for ``0 <= n <= n_max``.

    ``p(n, x)`` returns ``p_n(x, y)``; ``slice(n)`` returns the non-zero
    entries of slice ``n`` as a dict ``vertex -> probability``.
    """

    def __init__(self, family, y, n_max: int, data, mode: str):
        self.family = family
        self.y = y
        self.n_max = n_max
        self._data = data
        self._mode = mode

    def p(self, n: int, x) -> float:
        if n < 0 or n > self.n_max:
            raise ValueError("step outside the table")
        fam = self.family
        if self._mode == "lattice":
            z = tuple(abs(a - b) for a, b in zip(x, self.y))
            arr = self._data[n]
            if max(z) >= arr.shape[0]:
                return 0.0
            return float(arr[z])
        if self._mode == "tree":
            q, s = self._data
            k = fam.distance(x, self.y)
            return float(q[n, k] / s[k]) if k <= n else 0.0
        return float(self._data[n].get(x, 0.0))

    def slice(self, n: int) -> dict:
        fam = self.family
        if self._mode == "dict":
            return dict(self._data[n])
        out = {}
        for x in fam.ball(self.y, n):
            v = self.p(n, x)
            if v > 0:
                out[x] = v
        return out

    def support(self, n: int) -> list:
        return list(self.slice(n))


@lru_cache(maxsize=32)
def _lattice_tables(d: int, n_max: int):
    _, kept = lattice_octant_profiles(d, n_max, keep=True, full=True)
    return kept


@lru_cache(maxsize=32)
def _tree_tables(d: int, n_max: int):
    return tree_distance_profile(d, n_max), tree_sphere_sizes(d, n_max)


def kernel_field(family, y, n_max: int, max_entries: int = MAX_ENTRIES) -> KernelField:
    """Exact ``p_n(x, y)``, ``0 <= n <= n_max``, by dynamic programming.

    Lattice tables are shared across base vertices (translation classes),
    tree tables across all pairs at equal distance; the grandparent graph
    is computed per base vertex on a dictionary.
    """
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    y = family.validate(y)
    if isinstance(family, Lattice):
        if sum((n + 1) ** family.d for n in range(n_max + 1)) > max_entries:
            raise MemoryError("kernel horizon exceeds the memory budget")
        return KernelField(family, y, n_max, _lattice_tables(family.d, n_max), "lattice")
    if isinstance(family, Grandparent):
        slices = [{y: 1.0}]
        total = 1
        for n in range(n_max):
            cur = slices[-1]
            nxt: dict = {}
            w = 1.0 / family.degree
            for x, px in cur.items():
                for z in family.neighbors(x):
                    nxt[z] = nxt.get(z, 0.0) + w * px
            total += len(nxt)
            if total > max_entries:
                raise MemoryError("kernel horizon exceeds the memory budget")
            mass = math.fsum(nxt.values())
            if abs(mass - 1.0) >= 1e-12:
                raise AssertionError("stochasticity drift exceeds 1e-12")
            slices.append({k: v / mass for k, v in nxt.items()})
        return KernelField(family, y, n_max, slices, "dict")
    if isinstance(family, RegularTree):
        return KernelField(family, y, n_max, _tree_tables(family.d, n_max), "tree")
    raise TypeError(f"unsupported family {family!r}")


# ----------------------------------------------------------------------
# samplers (python level)


def _pick(weights, u: float) -> int:
    c = np.cumsum(weights)
    k = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(k, len(weights) - 1)


def sample_srw(family, x, steps: int, stream: Stream) -> tuple:
    """Simple random walk of ``steps`` steps from ``x`` (length ``steps + 1``)."""
    x = family.validate(x)
    path = [x]
    if steps <= 0:
        return tuple(path)
    deg = family.degree
    js = np.minimum((stream.uniforms(steps) * deg).astype(np.int64), deg - 1)
    for j in js:
        path.append(family.neighbors(path[-1])[j])
    return tuple(path)


def sample_bridge(family, x, y, L: int, stream: Stream, kernel: KernelField | None = None) -> tuple:
    """Random walk of ``L`` steps from ``x`` conditioned to sit at ``y`` at time ``L``.

    Step ``k`` moves from ``w`` to neighbour ``z`` with probability
    ``p_1(w, z) p_{L-k-1}(z, y) / p_{L-k}(w, y)``.
    """
    x, y = family.validate(x), family.validate(y)
    kf = kernel if kernel is not None else kernel_field(family, y, L)
    if kf.p(L, x) <= 0.0:
        raise ValueError("infeasible bridge endpoint")
    path = [x]
    us = stream.uniforms(L) if L > 0 else []
    for k in range(L):
        w = path[-1]
        nb_ = family.neighbors(w)
        wts = np.array([kf.p(L - k - 1, z) for z in nb_])
        path.append(nb_[_pick(wts, float(us[k]))])
    if path[-1] != y:
        raise AssertionError("bridge missed its endpoint")
    return tuple(path)


# ----------------------------------------------------------------------
# heat kernel


@dataclass
class HeatProfile:
    family: object
    n: np.ndarray
    p: np.ndarray
    rescaled: np.ndarray
    running_max: np.ndarray

    def rows(self) -> list[tuple]:
        out = []
        for i, n in enumerate(self.n):
            out.append((int(n), float(self.p[i]), None if n == 0 else float(self.rescaled[i])))
        return out

    def to_csv(self) -> str:
        lines = ["n,p_n,rescaled,running_max"]
        for i, n in enumerate(self.n):
            r = "" if n == 0 else repr(float(self.rescaled[i]))
            m = "" if n == 0 else repr(float(self.running_max[i]))
            lines.append(f"{int(n)},{float(self.p[i])!r},{r},{m}")
        return "\n".join(lines) + "\n"


def heat_kernel_profile(family, n_max: int) -> HeatProfile:
    """Return probabilities ``p_n(o, o)`` and the rescaled ``n^{3/2} p_n(o, o)``."""
    if isinstance(family, Lattice):
        p, _ = lattice_octant_profiles(family.d, n_max)
    elif isinstance(family, Grandparent):
        kf = kernel_field(family, family.origin(), n_max)
        p = np.array([kf.p(n, family.origin()) for n in range(n_max + 1)])
    elif isinstance(family, RegularTree):
        p = tree_distance_profile(family.d, n_max)[:, 0].copy()
    else:
        raise TypeError(f"unsupported family {family!r}")
    n = np.arange(n_max + 1)
    resc = n ** 1.5 * p
    run = np.maximum.accumulate(np.where(n > 0, resc, 0.0))
    return HeatProfile(family, n, p, resc, run)


# ----------------------------------------------------------------------
# compiled walkers


@nb.njit(cache=True, inline="always")
def step(nbr, offs, v, j):
    if nbr.shape[0] > 0:
        return nbr[v, j]
    return v + offs[j]


@nb.njit(cache=True)
def _walk_paths(starts, keys, lanes, T, k0, k1, shift, nbr, offs, deg, index0):
    n = starts.shape[0]
    out = np.empty((n, T), dtype=np.int64)
    bad = 0
    for i in range(n):
        v = starts[i]
        out[i, 0] = v
        for t in range(1, T):
            if v < 0:
                out[i, t] = -1
                continue
            u = philox_uniform(keys[i] - shift, lanes[i], index0 + t - 1, k0, k1)
            j = int(u * deg)
            if j >= deg:
                j = deg - 1
            v = step(nbr, offs, v, j)
            if v < 0:
                bad += 1
            out[i, t] = v
    return out, bad


@nb.njit(cache=True)
def _walk_tree(arena_keys, h, dep, par, kids, ray, cnt, gp, starts, keys, lanes, T, k0, k1, deg, index0):
    n = starts.shape[0]
    out = np.empty((n, T), dtype=np.int64)
    bad = 0
    for i in range(n):
        v = starts[i]
        out[i, 0] = v
        for t in range(1, T):
            if v < 0:
                out[i, t] = -1
                continue
            u = philox_uniform(keys[i], lanes[i], index0 + t - 1, k0, k1)
            j = int(u * deg)
            if j >= deg:
                j = deg - 1
            v = tree_neighbor(arena_keys, h, dep, par, kids, ray, cnt, v, j, gp)
            if v < 0:
                bad += 1
            out[i, t] = v
    return out, bad


def walk_paths(space, starts, keys, lanes, T: int, field_: RandomField, index0: int = 0) -> np.ndarray:
    """Simple random walks with ``T`` vertices for many members at once.

    Member ``i`` starts at ``starts[i]`` and its ``t``-th step uses the
    uniform at ``(keys[i], lanes[i], index0 + t - 1)``.
    """
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    lanes = np.ascontiguousarray(np.broadcast_to(np.asarray(lanes, dtype=np.uint64), starts.shape))
    k0, k1 = field_.words
    if isinstance(space, TreeSpace):
        space.reserve(2 * starts.size * max(T - 1, 0) + 16)
        out, bad = _walk_tree(*space.arena, space.gp, starts, keys, lanes, int(T), k0, k1,
                              space.deg, np.uint64(index0))
        space._index = None
    else:
        out, bad = _walk_paths(starts, keys, lanes, int(T), k0, k1, field_.shift_u64,
                               space.nbr, space.offs, space.deg, np.uint64(index0))
    if bad:
        raise ValueError(f"{bad} walks left the materialised region")
    return out


class LatticeKernelTable:
    """Compact ``p_m(o, z)`` tables on Z^d for ``0 <= m <= L``.

    Values are stored on the fundamental domain ``|z_1| >= ... >= |z_d|``
    (sorted absolute coordinates) using the combinatorial number system, so
    the footprint is about ``L^{d+1} / (d+1)!`` doubles.
    """

    def __init__(self, d: int, L: int, full: bool | None = None):
        self.d = d
        self.L = L
        full = L <= 40 if full is None else full
        _, kept = lattice_octant_profiles(d, L, keep=True, full=full)
        sizes, offsets, radii = [], [0], []
        vals = []
        for m, arr in enumerate(kept):
            r = arr.shape[0] - 1
            radii.append(r)
            idx = _sorted_domain(d, r)
            v = arr[tuple(idx.T)]
            vals.append(v)
            sizes.append(v.size)
            offsets.append(offsets[-1] + v.size)
        self.values = np.concatenate(vals)
        self.offsets = np.array(offsets, dtype=np.int64)
        self.radii = np.array(radii, dtype=np.int64)
        self.binom = _binom_table(L + d + 2, d + 1)

    def p(self, m: int, z) -> float:
        return float(_table_lookup(self.values, self.offsets, self.radii, self.binom,
                                   m, np.asarray(z, dtype=np.int64)))


def _sorted_domain(d: int, r: int) -> np.ndarray:
    """All nonincreasing tuples in ``[0, r]^d`` in combinatorial-number order."""
    out = []

    def rec(prefix, bound, k):
        if k == 0:
            out.append(prefix)
            return
        for a in range(bound + 1):
            rec(prefix + [a], a, k - 1)

    rec([], r, d)
    arr = np.array(out, dtype=np.int64).reshape(-1, d)
    binom = _binom_table(r + d + 2, d + 1)
    order = np.argsort([_rank(binom, row) for row in arr])
    return arr[order]


def _rank(binom, row) -> int:
    d = len(row)
    return sum(int(binom[row[i] + d - 1 - i, d - i]) for i in range(d))


def _binom_table(n: int, k: int) -> np.ndarray:
    t = np.zeros((n + 1, k + 1), dtype=np.int64)
    for i in range(n + 1):
        t[i, 0] = 1
        for j in range(1, min(i, k) + 1):
            t[i, j] = t[i - 1, j - 1] + (t[i - 1, j] if j <= i - 1 else 0)
    return t


@nb.njit(cache=True)
def _table_lookup(values, offsets, radii, binom, m, z):
    d = z.shape[0]
    a = np.empty(d, dtype=np.int64)
    for i in range(d):
        a[i] = abs(z[i])
    a = np.sort(a)[::-1]
    if a[0] > radii[m]:
        return 0.0
    r = 0
    for i in range(d):
        r += binom[a[i] + d - 1 - i, d - i]
    return values[offsets[m] + r]
