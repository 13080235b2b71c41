"""Partial matching of two Poisson clouds on the vertex set by soft local times.

Every point ``x_i`` of ``R1`` is matched to one point of a space-time
Poisson field ``Y`` on ``V x R_+``.  The field's points below ``alpha`` are
the points of ``R2`` (with uniform labels), the points above ``alpha`` are
extra "phantom" arrivals generated lazily from each vertex's stream.

The matching runs in rounds.  In each round every unmatched point draws a
fresh uniform and the points that beat all unmatched competitors within
the conflict range grow the surface ``g`` by ``eta_i * p_L(x_i, .)`` until
it swallows the next field arrival.  Supports of simultaneously growing
points are disjoint, so a round is a set of independent growths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba as nb
import numpy as np

from .graph import Grandparent, Lattice
from .harness.rng import RandomField, lane_id, philox_uniform, sublane
from .pointproc import occurrence_index
from .space import LatticeSpace, TreeSpace, Window
from .walk import lattice_octant_profiles, tree_distance_profile, tree_sphere_sizes

__all__ = [
    "slt_match",
    "MatchResult",
    "slt_diagnostics",
    "lattice_support",
    "tree_support",
    "SLT_LANES",
    "poisson_points",
]

SLT_LANES = {name: lane_id(name) for name in ("slt.label", "slt.above", "slt.round")}

STATUS_OK, STATUS_ROUNDS = 0, 1


# ----------------------------------------------------------------------
# kernel supports


@dataclass(frozen=True)
class LatticeSupport:
    L: int
    offsets: np.ndarray  # (k, d) integer displacements
    p: np.ndarray  # renormalised kernel values
    omitted: float  # kernel mass outside the support
    metric: int  # 1: full l1 ball, conflicts at l1 <= 2L; 2: l2 ball of radius r
    radius: float  # l1 radius L or l2 radius r
    conflict: float  # conflict range in that metric


@lru_cache(maxsize=64)
def lattice_support(d: int, L: int, tol: float = 1e-3, max_full: int = 20000) -> LatticeSupport:
    """Support of ``p_L(o, .)`` on Z^d as displacement offsets.

    The full support (the l1 ball of radius L with the parity of L) is
    used while it has at most ``max_full`` points; beyond that it is cut to
    the smallest Euclidean ball whose complement carries mass at most
    ``tol`` and the kernel is renormalised on it.
    """
    _, kept = lattice_octant_profiles(d, L, keep=True)
    oct_ = kept[-1]
    R = oct_.shape[0] - 1
    rng = np.arange(-R, R + 1)
    grid = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    l1 = np.abs(grid).sum(axis=1)
    ok = (l1 <= L) & ((l1 - L) % 2 == 0)
    grid = grid[ok]
    vals = oct_[tuple(np.abs(grid).T)]
    nz = vals > 0
    grid, vals = grid[nz], vals[nz]
    if grid.shape[0] <= max_full:
        return LatticeSupport(L, grid, vals / vals.sum(), float(max(0.0, 1.0 - vals.sum())), 1, float(L), float(2 * L))
    r2 = (grid.astype(float) ** 2).sum(axis=1)
    order = np.argsort(r2)
    cum = np.cumsum(vals[order])
    k = int(np.searchsorted(cum, 1.0 - tol))
    rad2 = r2[order][min(k, len(order) - 1)]
    keep = r2 <= rad2
    mass = float(vals[keep].sum())
    r = math.sqrt(rad2)
    return LatticeSupport(L, grid[keep], vals[keep] / mass, 1.0 - mass, 2, r, 2 * r)


def tree_support(d: int, L: int, tol: float = 0.0) -> tuple[int, np.ndarray, float]:
    """Radius ``r`` and per-distance kernel values ``p[k]`` (``k <= r``) on the d-regular tree.

    ``r`` is the smallest radius whose complement carries kernel mass at
    most ``tol`` (``r = L`` when ``tol = 0``); values are renormalised.
    """
    q = tree_distance_profile(d, L)[L]
    tail = np.append(np.cumsum(q[::-1])[::-1], 0.0)
    r = int(np.nonzero(tail[1:] <= tol)[0][0])
    mass = q[: r + 1].sum()
    s = tree_sphere_sizes(d, r)
    return r, q[: r + 1] / s / mass, float(1.0 - mass)


# ----------------------------------------------------------------------
# compiled core


@nb.njit(cache=True)
def _vertex_key(y, vmode, ckeys, lo, N, d, bits, bias):
    if vmode == 1:
        return ckeys[y]
    rem = y
    code = np.int64(0)
    for k in range(d - 1, -1, -1):
        c = rem % N + lo[k]
        rem //= N
        code += (c + bias) << (bits * k)
    return np.uint64(code)


@nb.njit(cache=True)
def _next_arrival(y, a, nxt_cur, r2ptr, r2t, alpha, lane_above, k0, k1, shift, vmode, ckeys, lo, N, d, bits, bias):
    """Time of arrival number ``a`` at vertex ``y`` given arrival ``a-1`` at ``nxt_cur``."""
    c = r2ptr[y + 1] - r2ptr[y]
    if a < c:
        return r2t[r2ptr[y] + a]
    k = a - c
    base = alpha if k == 0 else nxt_cur
    key = _vertex_key(y, vmode, ckeys, lo, N, d, bits, bias)
    u = philox_uniform(key - shift, lane_above, k, k0, k1)
    return base - math.log(u)


@nb.njit(cache=True)
def _slt_kernel(r1_base, r1_key, r1_lane,
                shared, soff, sp, sptr, sidx, spv,
                cptr, cidx,
                nv, r2ptr, r2t, r2m,
                vmode, ckeys, lo, N, d, bits, bias,
                alpha, lane_above, k0, k1, shift, max_rounds):
    n1 = r1_base.shape[0]
    # slack = next arrival above the surface minus the surface (-1: untouched)
    slack = np.full(nv, -1.0)
    nxt = np.zeros(nv)
    cons = np.zeros(nv, dtype=np.int32)
    pair_y = np.full(n1, -1, dtype=np.int64)
    pair_t = np.zeros(n1)
    pair_m = np.full(n1, -1, dtype=np.int64)
    pair_a = np.zeros(n1, dtype=np.int64)
    eta = np.zeros(n1)
    rnd_of = np.full(n1, -1, dtype=np.int64)
    alive = np.ones(n1, dtype=np.bool_)
    alist = np.arange(n1)
    n_alive = n1
    clen = np.empty(n1, dtype=np.int64)
    for i in range(n1):
        clen[i] = cptr[i + 1] - cptr[i]
    U = np.empty(n1)
    sel = np.empty(n1, dtype=np.int64)
    msup = soff.shape[0] if shared else 0
    if not shared:
        for i in range(n1):
            msup = max(msup, sptr[i + 1] - sptr[i])
    ybuf = np.empty(msup, dtype=np.int64)
    pbuf = np.empty(msup)
    qbuf = np.empty(msup)
    spinv = 1.0 / sp
    rnd = 0
    ties = 0
    status = 0
    while n_alive > 0:
        if rnd >= max_rounds:
            status = 1
            break
        for a in range(n_alive):
            i = alist[a]
            U[i] = philox_uniform(r1_key[i] - shift, r1_lane[i], rnd, k0, k1)
        ns = 0
        for a in range(n_alive):
            i = alist[a]
            ui = U[i]
            ismin = True
            # dead competitors are swapped out as they are met
            s = cptr[i]
            q = s
            end = s + clen[i]
            while q < end:
                j = cidx[q]
                if not alive[j]:
                    end -= 1
                    cidx[q] = cidx[end]
                    continue
                if U[j] <= ui:
                    ismin = False
                    break
                q += 1
            clen[i] = end - s
            if ismin:
                sel[ns] = i
                ns += 1
        for b in range(ns):
            i = sel[b]
            if shared:
                m = soff.shape[0]
                for k in range(m):
                    ybuf[k] = r1_base[i] + soff[k]
                    pbuf[k] = sp[k]
                    qbuf[k] = spinv[k]
            else:
                m = sptr[i + 1] - sptr[i]
                for k in range(m):
                    ybuf[k] = sidx[sptr[i] + k]
                    pbuf[k] = spv[sptr[i] + k]
                    qbuf[k] = 1.0 / pbuf[k]
            best = np.inf
            second = np.inf
            by = -1
            for k in range(m):
                y = ybuf[k]
                sl = slack[y]
                if sl < 0.0:
                    nxt[y] = _next_arrival(y, 0, 0.0, r2ptr, r2t, alpha, lane_above, k0, k1, shift,
                                           vmode, ckeys, lo, N, d, bits, bias)
                    sl = nxt[y]
                    slack[y] = sl
                c = sl * qbuf[k]
                if c < best:
                    second = best
                    best = c
                    by = y
                elif c < second:
                    second = c
            if second == best:
                ties += 1
            for k in range(m):
                y = ybuf[k]
                sl = slack[y] - best * pbuf[k]
                slack[y] = sl
                if sl <= 0.0 and y != by:
                    ties += 1
            t = nxt[by]
            a = cons[by]
            c2 = r2ptr[by + 1] - r2ptr[by]
            pair_y[i] = by
            pair_t[i] = t
            pair_m[i] = r2m[r2ptr[by] + a] if a < c2 else -1
            pair_a[i] = a
            eta[i] = best
            rnd_of[i] = rnd
            cons[by] = a + 1
            nxt[by] = _next_arrival(by, a + 1, t, r2ptr, r2t, alpha, lane_above, k0, k1, shift,
                                    vmode, ckeys, lo, N, d, bits, bias)
            slack[by] = nxt[by] - t
            alive[i] = False
        w = 0
        for a in range(n_alive):
            i = alist[a]
            if alive[i]:
                alist[w] = i
                w += 1
        n_alive = w
        rnd += 1
    g = np.zeros(nv)
    for y in range(nv):
        if slack[y] >= 0.0:
            g[y] = nxt[y] - slack[y]
    return pair_y, pair_t, pair_m, pair_a, eta, rnd_of, g, cons, rnd, ties, status


@nb.njit(cache=True)
def _grid_scan(sc, cell, start, ncell, Dint, metric, counts, idx, fill, order, write):
    """Scan neighbouring cells of cell-sorted points ``sc`` for pairs ``i < j`` within range."""
    n, d = sc.shape
    nb3 = 3 ** d
    ci = np.empty(d, dtype=np.int64)
    for i in range(n):
        rem = cell[i]
        for k in range(d - 1, -1, -1):
            ci[k] = rem % ncell
            rem //= ncell
        for t in range(nb3):
            rr = t
            c = 0
            inside = True
            for k in range(d):
                cc = ci[k] + rr % 3 - 1
                rr //= 3
                if cc < 0 or cc >= ncell:
                    inside = False
                    break
                c = c * ncell + cc
            if not inside:
                continue
            for j in range(max(start[c], i + 1), start[c + 1]):
                s = 0
                if metric == 1:
                    for k in range(d):
                        s += abs(sc[i, k] - sc[j, k])
                else:
                    for k in range(d):
                        z = sc[i, k] - sc[j, k]
                        s += z * z
                if s <= Dint:
                    if write:
                        idx[fill[i]] = order[j]
                        fill[i] += 1
                        idx[fill[j]] = order[i]
                        fill[j] += 1
                    else:
                        counts[i] += 1
                        counts[j] += 1


@nb.njit(cache=True)
def _grid_conflicts(coords, lo, ncell, D, metric):
    """CSR conflict lists of points within distance ``D`` (l1 or l2 metric)."""
    n, d = coords.shape
    cs = max(1, int(math.ceil(D)))
    cell0 = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = 0
        for k in range(d):
            c = c * ncell + (coords[i, k] - lo[k]) // cs
        cell0[i] = c
    order = np.argsort(cell0)
    sc = np.empty((n, d), dtype=np.int64)
    cell = np.empty(n, dtype=np.int64)
    for a in range(n):
        cell[a] = cell0[order[a]]
        for k in range(d):
            sc[a, k] = coords[order[a], k]
    start = np.zeros(ncell ** d + 1, dtype=np.int64)
    for i in range(n):
        start[cell[i] + 1] += 1
    for c in range(ncell ** d):
        start[c + 1] += start[c]
    Dint = int(math.floor(D + 1e-9)) if metric == 1 else int(math.floor(D * D + 1e-9))
    counts = np.zeros(n, dtype=np.int64)
    idx = np.empty(0, dtype=np.int32)
    fill = np.zeros(n, dtype=np.int64)
    _grid_scan(sc, cell, start, ncell, Dint, metric, counts, idx, fill, order, False)
    # counts are in sorted order; lay the lists out in original order
    ptr = np.zeros(n + 1, dtype=np.int64)
    cnt = np.empty(n, dtype=np.int64)
    for a in range(n):
        cnt[order[a]] = counts[a]
    for i in range(n):
        ptr[i + 1] = ptr[i] + cnt[i]
    idx = np.empty(ptr[n], dtype=np.int32)
    for a in range(n):
        fill[a] = ptr[order[a]]
    _grid_scan(sc, cell, start, ncell, Dint, metric, counts, idx, fill, order, True)
    return ptr, idx


@nb.njit(cache=True)
def _offset_conflicts(cid, nv, offs):
    """CSR conflict lists by scanning a fixed offset set on a compact grid.

    ``cid`` are compact grid indices of the points and ``offs`` the compact
    offsets of the conflict ball (excluding 0); points sharing a site also
    conflict.
    """
    n = cid.shape[0]
    start = np.zeros(nv + 1, dtype=np.int64)
    for i in range(n):
        start[cid[i] + 1] += 1
    for c in range(nv):
        start[c + 1] += start[c]
    occ = np.empty(n, dtype=np.int64)
    fill = start[:-1].copy()
    for i in range(n):
        occ[fill[cid[i]]] = i
        fill[cid[i]] += 1
    ptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        c = start[cid[i] + 1] - start[cid[i]] - 1
        for o in offs:
            y = cid[i] + o
            c += start[y + 1] - start[y]
        ptr[i + 1] = ptr[i] + c
    idx = np.empty(ptr[n], dtype=np.int32)
    for i in range(n):
        w = ptr[i]
        y = cid[i]
        for q in range(start[y], start[y + 1]):
            if occ[q] != i:
                idx[w] = occ[q]
                w += 1
        for o in offs:
            y = cid[i] + o
            for q in range(start[y], start[y + 1]):
                idx[w] = occ[q]
                w += 1
    return ptr, idx


@nb.njit(cache=True)
def _tree_dist(par, h, a, b):
    k = 0
    while h[a] < h[b]:
        a = par[a]
        k += 1
    while h[b] < h[a]:
        b = par[b]
        k += 1
    while a != b:
        a = par[a]
        b = par[b]
        k += 2
    return k


@nb.njit(cache=True)
def _tree_conflicts(pts, par, h, D):
    n = pts.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            if _tree_dist(par, h, pts[i], pts[j]) <= D:
                counts[i] += 1
                counts[j] += 1
    ptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        ptr[i + 1] = ptr[i] + counts[i]
    idx = np.empty(ptr[n], dtype=np.int32)
    fill = ptr[:-1].copy()
    for i in range(n):
        for j in range(i + 1, n):
            if _tree_dist(par, h, pts[i], pts[j]) <= D:
                idx[fill[i]] = j
                fill[i] += 1
                idx[fill[j]] = i
                fill[j] += 1
    return ptr, idx


# ----------------------------------------------------------------------
# results


@dataclass
class MatchResult:
    """Outcome of one matching.

    ``pair_y[i]`` / ``pair_t[i]`` give the vertex id and time of the field
    point matched to ``R1[i]``; ``pair_r2[i]`` is the index in ``R2`` of
    that point or ``-1`` for a phantom, ``pair_arrival[i]`` its rank among
    the field arrivals at its vertex.  ``eta`` and ``rounds`` record the
    growth parameter and round of each match.  ``g_at`` and the per-vertex
    counters are available through methods on vertex ids.
    """

    space: object
    alpha: float
    L: int
    r1: np.ndarray
    r2: np.ndarray
    r2_labels: np.ndarray
    pair_y: np.ndarray
    pair_t: np.ndarray
    pair_r2: np.ndarray
    pair_arrival: np.ndarray
    eta: np.ndarray
    rounds: np.ndarray
    n_rounds: int
    ties: int
    support_omitted: float
    _g: np.ndarray = field(repr=False, default=None)
    _cons: np.ndarray = field(repr=False, default=None)
    _compact: object = field(repr=False, default=None)
    _r2count: np.ndarray = field(repr=False, default=None)

    def compact(self, ids) -> np.ndarray:
        return self._compact(np.asarray(ids, dtype=np.int64))

    def g_at(self, ids) -> np.ndarray:
        return self._g[self.compact(ids)]

    def consumed_at(self, ids) -> np.ndarray:
        return self._cons[self.compact(ids)].astype(np.int64)

    def r2_count_at(self, ids) -> np.ndarray:
        return self._r2count[self.compact(ids)]

    def unmatched_r2_at(self, ids) -> np.ndarray:
        c = self.r2_count_at(ids)
        return c - np.minimum(self.consumed_at(ids), c)

    def phantom_at(self, ids) -> np.ndarray:
        return np.maximum(self.consumed_at(ids) - self.r2_count_at(ids), 0)

    @property
    def matched_r2(self) -> np.ndarray:
        """Boolean mask over ``R2``: consumed by some R1 point."""
        m = np.zeros(self.r2.size, dtype=bool)
        ok = self.pair_r2 >= 0
        m[self.pair_r2[ok]] = True
        return m

    @property
    def phantom(self) -> np.ndarray:
        return self.pair_r2 < 0


def _lattice_compact(space: LatticeSpace, lo: np.ndarray, N: int):
    d = space.d

    def f(ids):
        c = space.coords(ids) - lo
        out = np.zeros(c.shape[:-1], dtype=np.int64)
        for k in range(d):
            out = out * N + c[..., k]
        return out

    return f


def slt_match(family, R1, R2, alpha: float, L: int, window: Window, field_: RandomField, space=None,
              tol: float = 1e-3, r2_labels=None, max_rounds: int = 10_000_000,
              max_full: int = 20000, tag: str = "") -> MatchResult:
    """Match every point of ``R1`` to a point of the field built on ``R2``.

    ``R1`` and ``R2`` are arrays of vertex ids of ``space`` lying in the
    window.  Randomness: the label of the ``j``-th R2 point at ``y`` and the
    arrivals above ``alpha`` at ``y`` come from ``y``'s stream, the round
    uniforms of the ``j``-th R1 point at ``x`` from ``x``'s stream.
    ``r2_labels`` overrides the R2 labels (values in ``[0, alpha]``) and
    ``tag`` prefixes the lane names so that repeated matchings draw
    independent randomness.
    """
    if isinstance(family, Grandparent):
        raise NotImplementedError("soft local time matching is implemented for lattices and trees")
    if L < 0 or alpha <= 0:
        raise ValueError("need L >= 0 and alpha > 0")
    R1 = np.ascontiguousarray(R1, dtype=np.int64)
    R2 = np.ascontiguousarray(R2, dtype=np.int64)
    k0, k1 = field_.words
    shift = field_.shift_u64
    if r2_labels is None:
        occ2 = occurrence_index(R2)
        r2_labels = alpha * field_.uniform(space.keys(R2), sublane(lane_id(tag + "slt.label"), occ2))
    r2_labels = np.asarray(r2_labels, dtype=float)
    occ1 = occurrence_index(R1)
    r1_key = np.ascontiguousarray(space.keys(R1), dtype=np.uint64)
    r1_lane = np.ascontiguousarray(sublane(lane_id(tag + "slt.round"), occ1), dtype=np.uint64)
    if isinstance(space, LatticeSpace):
        d = space.d
        sup = lattice_support(d, int(L), tol, max_full)
        ext = int(np.abs(sup.offsets).max()) if sup.offsets.size else 0
        c0 = np.array(space.center if window.center is None else window.center, dtype=np.int64)
        lo = c0 - window.radius - ext
        N = 2 * (window.radius + ext) + 1
        comp = _lattice_compact(space, lo, N)
        for arr in (R1, R2):
            if arr.size and np.any(space.sup_dist(arr, c0) > window.radius):
                raise ValueError("points outside the window")
        nv = N ** d
        base = comp(R1)
        soff = np.zeros(sup.offsets.shape[0], dtype=np.int64)
        for k in range(d):
            soff = soff * N + sup.offsets[:, k]
        shared = True
        sptr = np.zeros(1, dtype=np.int64)
        sidx = np.zeros(0, dtype=np.int64)
        spv = np.zeros(0)
        sp = sup.p
        cptr, cidx = _lattice_conflicts(space, R1, c0, window.radius, sup)
        vmode, ckeys = 0, np.zeros(0, dtype=np.uint64)
        omitted = sup.omitted
        bits, bias = space.bits, space.bias
    else:
        d = 1
        r, pd, omitted = tree_support(family.d, int(L), tol)
        ptrs = [0]
        idxs, vals = [], []
        for x in R1:
            ids, dist = space.ball_around([int(x)], r, tree_metric=True)
            pos = pd[dist] > 0
            idxs.append(ids[pos])
            vals.append(pd[dist][pos])
            ptrs.append(ptrs[-1] + idxs[-1].size)
        sptr = np.array(ptrs, dtype=np.int64)
        sidx = np.concatenate(idxs) if idxs else np.zeros(0, dtype=np.int64)
        spv = np.concatenate(vals) if vals else np.zeros(0)
        shared = False
        soff = np.zeros(0, dtype=np.int64)
        sp = np.zeros(0)
        base = R1
        nv = space.n
        cptr, cidx = _tree_conflict_lists(space, R1, 2 * r, family.d)
        vmode, ckeys = 1, space.keys_arr
        lo = np.zeros(1, dtype=np.int64)
        N = 1
        bits, bias = 0, 0

        def comp(ids):
            return np.asarray(ids, dtype=np.int64)

    c2 = comp(R2)
    order = np.lexsort((r2_labels, c2))
    r2ptr = np.zeros(nv + 1, dtype=np.int64)
    np.add.at(r2ptr, c2 + 1, 1)
    r2count = r2ptr[1:].copy()
    r2ptr = np.cumsum(r2ptr)
    r2t = np.ascontiguousarray(r2_labels[order])
    r2m = np.ascontiguousarray(order.astype(np.int64))
    out = _slt_kernel(np.ascontiguousarray(base, dtype=np.int64), r1_key, r1_lane,
                      shared, soff, sp, sptr, sidx, spv,
                      cptr, cidx,
                      nv, r2ptr, r2t, r2m,
                      vmode, ckeys, lo, N, d, bits, bias,
                      float(alpha), np.uint64(lane_id(tag + "slt.above")), k0, k1, shift, max_rounds)
    pair_y, pair_t, pair_m, pair_a, eta, rnd_of, g, cons, n_rounds, ties, status = out
    if status == STATUS_ROUNDS:
        raise RuntimeError(f"round cap {max_rounds} reached with unmatched points")
    if ties:
        raise RuntimeError(f"{ties} ties in candidate minima")
    if isinstance(space, LatticeSpace):
        py = _decompact(pair_y, lo, N, space)
    else:
        py = pair_y
    return MatchResult(space, float(alpha), int(L), R1, R2, r2_labels, py, pair_t, pair_m, pair_a, eta, rnd_of,
                       int(n_rounds), int(ties), float(omitted), g, cons, comp, r2count)


def _lattice_conflicts(space: LatticeSpace, R1, c0, radius: int, sup: LatticeSupport):
    """Conflict lists, by offset scan when the conflict ball is small, else by cell grid."""
    d = space.d
    D = sup.conflict
    R = int(math.ceil(D))
    rng = np.arange(-R, R + 1)
    coords = space.coords(R1)
    ball_size = (2 * R + 1) ** d
    density = R1.size / (2 * radius + 1) ** d
    if ball_size <= 3 ** d * (R + 1) ** d * density * 8 and ball_size <= 2_000_000:
        grid = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
        dist = np.abs(grid).sum(axis=1) if sup.metric == 1 else np.sqrt((grid.astype(float) ** 2).sum(axis=1))
        grid = grid[(dist <= D) & (np.abs(grid).sum(axis=1) > 0)]
        N = 2 * (radius + R) + 1
        lo = np.asarray(c0, dtype=np.int64) - radius - R
        rel = coords - lo
        cid = np.zeros(R1.size, dtype=np.int64)
        offs = np.zeros(grid.shape[0], dtype=np.int64)
        for k in range(d):
            cid = cid * N + rel[:, k]
            offs = offs * N + grid[:, k]
        return _offset_conflicts(cid, N ** d, offs)
    lo = np.asarray(c0, dtype=np.int64) - radius
    ncell = (2 * radius + 1) // max(1, R) + 2
    return _grid_conflicts(coords, lo, ncell, float(D), sup.metric)


def _tree_conflict_lists(space: TreeSpace, R1, D: int, d: int):
    """Conflict lists at tree distance ``<= D``: pairwise for few points, by balls otherwise."""
    n = R1.size
    ball = 1 + d * ((d - 1) ** D - 1) // (d - 2) if d > 2 else 2 * D + 1
    if n * n <= 4 * n * ball:
        return _tree_conflicts(R1, space.par, space.h, D)
    uniq, inv = np.unique(R1, return_inverse=True)
    balls = [space.ball_around([int(x)], D, tree_metric=True)[0] for x in uniq]
    bptr = np.zeros(uniq.size + 1, dtype=np.int64)
    bptr[1:] = np.cumsum([b.size for b in balls])
    bidx = np.concatenate(balls)
    return _ball_conflicts(R1, inv.astype(np.int64), bptr, bidx, space.n)


@nb.njit(cache=True)
def _ball_conflicts(pts, inv, bptr, bidx, nv):
    n = pts.shape[0]
    start = np.zeros(nv + 1, dtype=np.int64)
    for i in range(n):
        start[pts[i] + 1] += 1
    for c in range(nv):
        start[c + 1] += start[c]
    occ = np.empty(n, dtype=np.int64)
    fill = start[:-1].copy()
    for i in range(n):
        occ[fill[pts[i]]] = i
        fill[pts[i]] += 1
    ptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        c = -1
        u = inv[i]
        for q in range(bptr[u], bptr[u + 1]):
            y = bidx[q]
            c += start[y + 1] - start[y]
        ptr[i + 1] = ptr[i] + c
    idx = np.empty(ptr[n], dtype=np.int32)
    for i in range(n):
        w = ptr[i]
        u = inv[i]
        for q in range(bptr[u], bptr[u + 1]):
            y = bidx[q]
            for t in range(start[y], start[y + 1]):
                if occ[t] != i:
                    idx[w] = occ[t]
                    w += 1
    return ptr, idx


def _decompact(c, lo, N, space):
    d = space.d
    coords = np.empty((c.size, d), dtype=np.int64)
    rem = c.copy()
    for k in range(d - 1, -1, -1):
        coords[:, k] = rem % N + lo[k]
        rem //= N
    return space.ids_of(coords)


# ----------------------------------------------------------------------
# diagnostics


def slt_diagnostics(results, ids_list, alpha: float, L: int, p2L: float) -> dict:
    """Pooled statistics over matchings.

    ``ids_list[k]`` are the vertices (ids) where statistics of
    ``results[k]`` are read; each vertex is a sample of ``g(y, final)``
    and of the unmatched / phantom counts.
    """
    gs, un, ph = [], [], []
    for res, ids in zip(results, ids_list):
        gs.append(res.g_at(ids))
        un.append(res.unmatched_r2_at(ids))
        ph.append(res.phantom_at(ids))
    g = np.concatenate(gs)
    u = np.concatenate(un)
    f = np.concatenate(ph)
    bound = math.sqrt(2 * alpha * p2L)
    return {
        "n": int(g.size),
        "g_mean": float(g.mean()),
        "g_se": float(g.std(ddof=1) / math.sqrt(g.size)),
        "g_var": float(g.var(ddof=1)),
        "g_var_target": 2 * alpha * p2L,
        "unmatched_mean": float(u.mean()),
        "phantom_mean": float(f.mean()),
        "bound": bound,
    }


def poisson_points(space, window: Window, rate: float, field_: RandomField, lane: str) -> np.ndarray:
    """Ids of a Poisson(rate) point cloud on the window (one draw per vertex)."""
    ids = space.window_ids(window)
    counts = field_.poisson(space.keys(ids), lane_id(lane), rate)
    return np.repeat(ids, counts)
