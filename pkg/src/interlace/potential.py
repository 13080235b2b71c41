"""Truncated equilibrium measures and capacity.

``e_K^s(x)`` is the probability that the walk started at ``x`` does not
visit ``K`` at any time ``1 <= n <= s``.  It is computed exactly by running
the backward recursion

    g_0 = 1,   g_m(z) = (1/deg) * sum_{w ~ z} 1[w not in K] g_{m-1}(w)

on a finite region outside which ``g`` is identically one, so that
``e_K^m(x) = g_m(x)`` for every ``m <= s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .graph import Grandparent, Lattice, RegularTree
from .walk import lattice_octant_profiles, tree_distance_profile

__all__ = ["eq_measure_trunc", "escape_table", "capacity", "CapacityResult", "singleton_escape"]

MAX_CELL_STEPS = 400_000_000


def _as_set(family, K) -> list:
    ks = sorted({family.validate(k) for k in K})
    if not ks:
        raise ValueError("K must be nonempty")
    return ks


@lru_cache(maxsize=16)
def _return_profile(kind: str, d: int, s: int) -> np.ndarray:
    if kind == "lattice":
        return lattice_octant_profiles(d, s)[0]
    return tree_distance_profile(d, s)[:, 0].copy()


def singleton_escape(family, s: int) -> np.ndarray:
    """``e_{{o}}^m(o)`` for ``0 <= m <= s`` from the return profile by renewal.

    First-return probabilities ``f`` solve ``p_n = sum_{k=1}^n f_k p_{n-k}``.
    """
    if isinstance(family, Grandparent):
        return escape_table(family, [family.origin()], s)[0]
    kind = "lattice" if isinstance(family, Lattice) else "tree"
    p = _return_profile(kind, family.d, s)
    f = np.zeros(s + 1)
    for n in range(1, s + 1):
        f[n] = p[n] - np.dot(f[1:n], p[n - 1:0:-1])
    return 1.0 - np.cumsum(f)


def escape_table(family, K, s: int, method: str = "auto") -> np.ndarray:
    """Array ``E`` with ``E[i, m] = e_K^m(K_i)`` for ``0 <= m <= s``.

    ``K`` is taken in sorted order.  ``method`` is one of
    ``auto``, ``box`` (lattice only), ``chain`` (trees only) or ``dict``
    (any family, small horizons).
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    ks = _as_set(family, K)
    if method == "auto":
        if isinstance(family, Lattice):
            method = "box"
        elif isinstance(family, Grandparent):
            method = "dict"
        else:
            method = "chain"
    if method == "box":
        return _lattice_box(family, ks, s)
    if method == "chain":
        return _tree_chain(family, ks, s)
    if method == "dict":
        return _generic_dict(family, ks, s)
    raise ValueError(f"unknown method {method!r}")


def _lattice_box(family: Lattice, ks, s: int) -> np.ndarray:
    d = family.d
    pts = np.array(ks, dtype=np.int64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    r = (s + 1) // 2 + 1
    lo, hi = lo - r, hi + r
    shape = tuple(int(x) for x in hi - lo + 1)
    if math.prod(shape) * max(s, 1) > MAX_CELL_STEPS:
        raise MemoryError("capacity horizon exceeds the computation budget")
    inK = np.zeros(shape, dtype=bool)
    idx = tuple((pts - lo).T)
    inK[idx] = True
    notK = (~inK).astype(float)
    g = np.ones(shape)
    out = np.empty((len(ks), s + 1))
    out[:, 0] = 1.0
    core = tuple(slice(1, n + 1) for n in shape)
    for m in range(1, s + 1):
        pad = np.pad(g * notK, 1, constant_values=1.0)
        new = np.zeros(shape)
        for ax in range(d):
            a = list(core)
            b = list(core)
            a[ax] = slice(2, shape[ax] + 2)
            b[ax] = slice(0, shape[ax])
            new += pad[tuple(a)] + pad[tuple(b)]
        g = new / (2 * d)
        out[:, m] = g[idx]
    return out


def _tree_chain(family: RegularTree, ks, s: int) -> np.ndarray:
    """Exact recursion on the convex hull of K plus lumped outer branches.

    Outside the hull every branch hanging at a hull vertex ``a`` behaves
    like the distance chain: away from the hull with probability
    ``(d-1)/d`` and back with probability ``1/d``.
    """
    d = family.d
    hull = set(ks)
    # hull = union of geodesics from ks[0]
    for v in ks[1:]:
        hull.update(_geodesic(family, ks[0], v))
    hull = sorted(hull)
    pos = {v: i for i, v in enumerate(hull)}
    nh = len(hull)
    inK = np.array([v in set(ks) for v in hull])
    nb_in = [[pos[w] for w in family.neighbors(v) if w in pos] for v in hull]
    n_out = np.array([d - len(x) for x in nb_in], dtype=float)
    g_hull = np.ones(nh)
    # chain[a, j] = g at depth j+1 in the branches at hull vertex a
    depth = s + 1
    chain = np.ones((nh, depth))
    out = np.empty((len(ks), s + 1))
    kidx = [pos[k] for k in ks]
    out[:, 0] = 1.0
    up = (d - 1) / d
    for m in range(1, s + 1):
        hv = g_hull * (~inK)
        new_h = np.array([hv[nb].sum() for nb in nb_in]) + n_out * chain[:, 0]
        new_h /= d
        new_c = np.empty_like(chain)
        new_c[:, 0] = (1 - up) * hv + up * chain[:, 1]
        new_c[:, 1:-1] = (1 - up) * chain[:, :-2] + up * chain[:, 2:]
        new_c[:, -1] = (1 - up) * chain[:, -2] + up
        g_hull, chain = new_h, new_c
        out[:, m] = g_hull[kidx]
    return out


def _geodesic(family, u, v) -> list:
    path = [u]
    while path[-1] != v:
        cur = path[-1]
        dist = family.distance(cur, v)
        for w in family.neighbors(cur):
            if family.distance(w, v) == dist - 1:
                path.append(w)
                break
    return path


def _generic_dict(family, ks, s: int) -> np.ndarray:
    r = (s + 1) // 2 + 1
    region: dict = {}
    front = list(ks)
    for k in ks:
        region[k] = 0
    for dist in range(1, r + 1):
        nxt = []
        for v in front:
            for w in family.neighbors(v):
                if w not in region:
                    region[w] = dist
                    nxt.append(w)
        front = nxt
        if len(region) * max(s, 1) > MAX_CELL_STEPS // 50:
            raise MemoryError("capacity horizon exceeds the computation budget")
    verts = list(region)
    pos = {v: i for i, v in enumerate(verts)}
    kset = set(ks)
    nb = [[pos.get(w, -1) for w in family.neighbors(v)] for v in verts]
    nbarr = np.array(nb, dtype=np.int64)
    notK = np.array([0.0 if v in kset else 1.0 for v in verts] + [1.0])
    g = np.ones(len(verts) + 1)
    kidx = [pos[k] for k in ks]
    out = np.empty((len(ks), s + 1))
    out[:, 0] = 1.0
    for m in range(1, s + 1):
        h = g * notK
        h[-1] = 1.0
        g_new = h[nbarr].mean(axis=1)
        g = np.append(g_new, 1.0)
        out[:, m] = g[kidx]
    return out


def eq_measure_trunc(family, K, x, s: int) -> float:
    """``e_K^s(x)``: probability of no visit to ``K`` at times ``1..s`` from ``x``."""
    ks = _as_set(family, K)
    x = family.validate(x)
    if x not in ks:
        raise ValueError("x must belong to K")
    if len(ks) == 1 and not isinstance(family, Grandparent):
        return float(singleton_escape(family, s)[s])
    return float(escape_table(family, ks, s)[ks.index(x), s])


@dataclass
class CapacityResult:
    K: list
    s: int
    value: float
    gap: float

    def to_json(self, family) -> dict:
        return {"K": [family.to_json(k) for k in self.K], "s": self.s, "value": self.value, "gap": self.gap}


def capacity(family, K, s: int = 64, tol: float = 1e-6, s_max: int = 4096) -> CapacityResult:
    """``sum_{x in K} e_K^s(x)`` with the dyadic truncation gap.

    The gap is ``cap^{s/2}(K) - cap^{s}(K)``; the horizon is doubled from
    ``s`` until the gap falls below ``tol``.  On Z^3 the truncation error
    decays like ``s^{-1/2}``, so the true error is a constant multiple
    (about 2.4) of the reported gap.
    """
    ks = _as_set(family, K)
    s = max(int(s), 2)
    while True:
        if len(ks) == 1 and not isinstance(family, Grandparent):
            col = singleton_escape(family, s)[None, :]
        else:
            col = escape_table(family, ks, s)
        full = float(col[:, s].sum())
        half = float(col[:, s // 2].sum())
        gap = half - full
        if gap < tol:
            return CapacityResult(ks, s, full, gap)
        if 2 * s > s_max:
            raise ValueError(f"tolerance {tol} not reached by horizon {s} (gap {gap:.3e})")
        s *= 2
