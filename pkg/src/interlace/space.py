"""Integer vertex ids for the numerical kernels.

A *space* gives every vertex a 64-bit integer id together with what the
compiled kernels need to step between them:

* ``LatticeSpace``: ids are the lattice keys themselves, so the whole
  infinite lattice is available and a neighbour is ``id + offs[j]``.
* ``TreeSpace``: vertices of a tree family are materialised in an arena
  that grows on demand; ids index its arrays and ``tree_neighbor`` returns
  (and if necessary creates) the ``j``-th neighbour.

``keys(ids)`` returns the vertex keys consumed by :class:`RandomField`;
they do not depend on the space, only on the vertex.
"""

from __future__ import annotations

import numba as nb
import numpy as np

from .graph import Grandparent, Lattice, RegularTree, TreeVertex
from .graph import _RAY_SALT
from .harness.rng import mix64

__all__ = ["LatticeSpace", "TreeSpace", "make_space", "Window"]


class Window:
    """Target region for a windowed simulation.

    ``radius`` is the radius of the region where members start, ``inner``
    the radius of the region whose statistics are reported.  Lattice
    windows are sup-norm boxes, tree windows are graph balls.
    """

    def __init__(self, radius: int, inner: int | None = None, center=None):
        self.radius = int(radius)
        self.inner = self.radius if inner is None else int(inner)
        self.center = center

    def __repr__(self) -> str:
        return f"Window(radius={self.radius}, inner={self.inner}, center={self.center!r})"


class LatticeSpace:
    def __init__(self, family: Lattice):
        self.family = family
        self.d = family.d
        self.deg = family.degree
        self.bits = family.bits
        self.bias = family.bias
        offs = []
        for i in range(self.d):
            offs += [1 << (self.bits * i), -(1 << (self.bits * i))]
        self.offs = np.array(offs, dtype=np.int64)
        self.nbr = np.zeros((0, self.deg), dtype=np.int64)
        self.center = family.origin()

    def keys(self, ids) -> np.ndarray:
        return np.asarray(ids, dtype=np.int64).view(np.uint64)

    def id_of(self, v) -> int:
        return self.family.key(v)

    def vertex(self, i) -> tuple:
        return self.family.from_key(int(i))

    def coords(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        mask = (1 << self.bits) - 1
        out = np.empty(ids.shape + (self.d,), dtype=np.int64)
        for i in range(self.d):
            out[..., i] = ((ids >> (self.bits * i)) & mask) - self.bias
        return out

    def ids_of(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        out = np.zeros(coords.shape[:-1], dtype=np.int64)
        for i in range(self.d):
            out += (coords[..., i] + self.bias) << (self.bits * i)
        return out

    def box(self, radius: int, center=None) -> np.ndarray:
        """Ids of the sup-norm box of the given radius (lexicographic order)."""
        c = np.array(self.center if center is None else center, dtype=np.int64)
        rng = np.arange(-radius, radius + 1)
        grid = np.stack(np.meshgrid(*([rng] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)
        return self.ids_of(grid + c)

    def window_ids(self, window: Window, inner: bool = False) -> np.ndarray:
        return self.box(window.inner if inner else window.radius, window.center)

    def sup_dist(self, ids, center=None) -> np.ndarray:
        c = np.array(self.center if center is None else center, dtype=np.int64)
        return np.abs(self.coords(ids) - c).max(axis=-1)

    def dist(self, a, b) -> np.ndarray:
        return np.abs(self.coords(a) - self.coords(b)).sum(axis=-1)

    def translate_ids(self, ids, g) -> np.ndarray:
        return np.asarray(ids, dtype=np.int64) + self.family.translation_code(g)

    def canon(self, ids) -> np.ndarray:
        """Space-independent vertex identifiers (here: the ids)."""
        return np.asarray(ids, dtype=np.int64).view(np.uint64)


@nb.njit(cache=True)
def _children_keys(keys, is_ray, ray_next, dm1):
    n = keys.shape[0]
    out = np.empty((n, dm1), dtype=np.uint64)
    for i in range(n):
        for c in range(dm1):
            if is_ray[i] and c == 0:
                out[i, c] = ray_next[i]
            else:
                out[i, c] = mix64(keys[i], np.uint64(c + 1))
    return out


_RAY = np.uint64(_RAY_SALT)


@nb.njit(cache=True)
def _alloc(keys, h, dep, par, kids, ray, cnt, key, hh, dd, pp, rr):
    i = cnt[0]
    if i >= keys.shape[0]:
        return -1
    keys[i] = key
    h[i] = hh
    dep[i] = dd
    par[i] = pp
    ray[i] = rr
    for c in range(kids.shape[1]):
        kids[i, c] = -1
    cnt[0] = i + 1
    return i


@nb.njit(cache=True)
def tree_parent(keys, h, dep, par, kids, ray, cnt, v):
    p = par[v]
    if p >= 0:
        return p
    # only ray vertices sit at the top of the arena
    p = _alloc(keys, h, dep, par, kids, ray, cnt, mix64(_RAY, np.uint64(h[v] + 1)),
               h[v] + 1, dep[v] + 1, -1, True)
    if p >= 0:
        par[v] = p
        kids[p, 0] = v
    return p


@nb.njit(cache=True)
def tree_child(keys, h, dep, par, kids, ray, cnt, v, c):
    k = kids[v, c]
    if k >= 0:
        return k
    if ray[v] and c == 0:
        key = mix64(_RAY, np.uint64(h[v] - 1))
        rr = True
    else:
        key = mix64(keys[v], np.uint64(c + 1))
        rr = False
    k = _alloc(keys, h, dep, par, kids, ray, cnt, key, h[v] - 1, dep[v] + 1, v, rr)
    if k >= 0:
        kids[v, c] = k
    return k


@nb.njit(cache=True)
def tree_neighbor(keys, h, dep, par, kids, ray, cnt, v, j, gp):
    """``j``-th neighbour in family order, materialising it when needed (-1 if full)."""
    dm1 = kids.shape[1]
    if j == 0:
        return tree_parent(keys, h, dep, par, kids, ray, cnt, v)
    if j <= dm1:
        return tree_child(keys, h, dep, par, kids, ray, cnt, v, j - 1)
    if not gp:
        return -1
    if j == dm1 + 1:
        p = tree_parent(keys, h, dep, par, kids, ray, cnt, v)
        if p < 0:
            return -1
        return tree_parent(keys, h, dep, par, kids, ray, cnt, p)
    k = j - dm1 - 2
    c = tree_child(keys, h, dep, par, kids, ray, cnt, v, k // dm1)
    if c < 0:
        return -1
    return tree_child(keys, h, dep, par, kids, ray, cnt, c, k % dm1)


@nb.njit(cache=True)
def _arena_ball(keys, h, dep, par, kids, ray, cnt, srcs, radius, deg, gp, mark):
    """Ids within graph distance ``radius`` of any source (materialising them).

    ``mark`` is a scratch int64 array of arena capacity filled with -1.
    Returns the ids and their distances.
    """
    out = np.empty(0, dtype=np.int64)
    cap = 1024
    buf = np.empty(cap, dtype=np.int64)
    dist = np.empty(cap, dtype=np.int64)
    n = 0
    for s in srcs:
        if mark[s] < 0:
            mark[s] = 0
            if n >= cap:
                cap *= 2
                buf = np.concatenate((buf, np.empty(cap - buf.shape[0], dtype=np.int64)))
                dist = np.concatenate((dist, np.empty(cap - dist.shape[0], dtype=np.int64)))
            buf[n] = s
            dist[n] = 0
            n += 1
    head = 0
    ok = True
    while head < n:
        v = buf[head]
        dv = dist[head]
        head += 1
        if dv == radius:
            continue
        for j in range(deg):
            w = tree_neighbor(keys, h, dep, par, kids, ray, cnt, v, j, gp)
            if w < 0:
                ok = False
                continue
            if mark[w] < 0:
                mark[w] = dv + 1
                if n >= cap:
                    cap *= 2
                    buf = np.concatenate((buf, np.empty(cap - buf.shape[0], dtype=np.int64)))
                    dist = np.concatenate((dist, np.empty(cap - dist.shape[0], dtype=np.int64)))
                buf[n] = w
                dist[n] = dv + 1
                n += 1
    for i in range(n):
        mark[buf[i]] = -1
    if not ok:
        return out, out
    return buf[:n].copy(), dist[:n].copy()


class TreeSpace:
    """A growable arena of vertices of a tree (or grandparent) family.

    The ball of ``radius`` around ``center`` (in the tree metric) is built
    up front; further vertices are materialised on demand by the compiled
    kernels, so long walks never need a huge pre-built ball.  Arrays
    (indexed by id, first ``n`` entries valid): ``keys_arr`` (field keys),
    ``h`` (height), ``depth`` (tree distance from the centre), ``par``
    (parent id, -1 if not yet materialised) and ``kids``.
    """

    def __init__(self, family: RegularTree, radius: int = 0, center=None):
        self.family = family
        self.d = family.d
        self.deg = family.degree
        self.gp = isinstance(family, Grandparent)
        self.radius = int(radius)
        tree = RegularTree(family.d)
        self.tree = tree
        center = tree.origin() if center is None else tree.validate(center)
        self.center = center
        self._build(center)
        self.offs = np.zeros(self.deg, dtype=np.int64)
        self.nbr = np.zeros((0, self.deg), dtype=np.int64)
        self._index = None
        self._mark = None

    def _build(self, center: TreeVertex):
        d, R = self.d, self.radius
        tree = self.tree
        anc = [center]
        while len(anc) <= R or anc[-1].word:
            anc.append(tree.parent(anc[-1]))
        A = len(anc) - 1
        self.anchor = anc
        # ids 0..A are the ancestors of the centre (the last one on the ray)
        keys = [tree.key(a) for a in anc]
        hs = [a.h for a in anc]
        dep = list(range(A + 1))
        par = [j + 1 for j in range(A)] + [-1]
        ray = [a.word == "" for a in anc]
        links = [(j, tree.child_index(anc[j - 1]), j - 1) for j in range(1, A + 1)]
        # the other children of each ancestor within the ball start subtrees
        n = A + 1
        for j in range(min(R, A + 1)):
            excl = tree.child_index(anc[j - 1]) if j >= 1 else -1
            for c in range(d - 1):
                if c == excl:
                    continue
                ch = tree.child(anc[j], c)
                keys.append(tree.key(ch))
                hs.append(ch.h)
                dep.append(j + 1)
                par.append(j)
                ray.append(ch.word == "")
                links.append((j, c, n))
                n += 1
        ck = [np.array(keys, dtype=np.uint64)]
        ch_ = [np.array(hs, dtype=np.int64)]
        cd = [np.array(dep, dtype=np.int64)]
        cp = [np.array(par, dtype=np.int64)]
        cr = [np.array(ray, dtype=np.bool_)]
        front = np.arange(A + 1, n, dtype=np.int64)
        f_k, f_h, f_d, f_r = ck[0][front], ch_[0][front], cd[0][front], cr[0][front]
        blocks = []
        while front.size:
            keep = f_d < R
            front, f_k, f_h, f_d, f_r = front[keep], f_k[keep], f_h[keep], f_d[keep], f_r[keep]
            if not front.size:
                break
            ray_next = np.zeros(front.size, dtype=np.uint64)
            for i in np.nonzero(f_r)[0]:
                ray_next[i] = tree.ray_key(int(f_h[i]) - 1)
            kk = _children_keys(f_k, f_r, ray_next, d - 1)
            m = front.size * (d - 1)
            new_ids = np.arange(n, n + m, dtype=np.int64).reshape(front.size, d - 1)
            blocks.append((front, new_ids))
            c_ray = np.zeros((front.size, d - 1), dtype=np.bool_)
            c_ray[:, 0] = f_r
            f_k = kk.ravel()
            f_h = np.repeat(f_h - 1, d - 1)
            f_d = np.repeat(f_d + 1, d - 1)
            f_r = c_ray.ravel()
            ck.append(f_k)
            ch_.append(f_h)
            cd.append(f_d)
            cp.append(np.repeat(front, d - 1))
            cr.append(f_r)
            front = new_ids.ravel()
            n += m
        kids = np.full((n, d - 1), -1, dtype=np.int64)
        for p, c, cid in links:
            kids[p, c] = cid
        for p, ids in blocks:
            kids[p] = ids
        cap = max(2 * n, 4096)
        self.keys_arr = _grow(np.concatenate(ck), cap)
        self.h = _grow(np.concatenate(ch_), cap)
        self.depth = _grow(np.concatenate(cd), cap)
        self.par = _grow(np.concatenate(cp), cap, -1)
        self.is_ray = _grow(np.concatenate(cr), cap)
        self.kids = _grow(kids, cap, -1)
        self.cnt = np.array([n], dtype=np.int64)
        self.n0 = n

    def reset(self) -> None:
        """Forget every vertex materialised after construction."""
        n0 = self.n0
        k = self.kids[:n0]
        k[k >= n0] = -1
        p = self.par[:n0]
        p[p >= n0] = -1
        self.cnt[0] = n0
        self._index = None

    # arena management -------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.cnt[0])

    @property
    def capacity(self) -> int:
        return self.keys_arr.shape[0]

    def reserve(self, extra: int) -> None:
        """Make room for at least ``extra`` further vertices."""
        need = self.n + int(extra)
        if need <= self.capacity:
            return
        cap = max(need, 2 * self.capacity)
        self.keys_arr = _grow(self.keys_arr, cap)
        self.h = _grow(self.h, cap)
        self.depth = _grow(self.depth, cap)
        self.par = _grow(self.par, cap, -1)
        self.is_ray = _grow(self.is_ray, cap)
        self.kids = _grow(self.kids, cap, -1)

    @property
    def arena(self) -> tuple:
        return (self.keys_arr, self.h, self.depth, self.par, self.kids, self.is_ray, self.cnt)

    def neighbor(self, v: int, j: int) -> int:
        self.reserve(2)
        self._index = None
        return int(tree_neighbor(*self.arena, int(v), int(j), self.gp))

    def neighbor_ids(self, v: int) -> list[int]:
        return [self.neighbor(v, j) for j in range(self.deg)]

    def ball_around(self, srcs, radius: int, tree_metric: bool = False):
        """Ids (and distances) within ``radius`` of the sources, materialising them.

        Distances are in the family metric unless ``tree_metric``.
        """
        srcs = np.atleast_1d(np.asarray(srcs, dtype=np.int64))
        deg = self.d if tree_metric else self.deg
        gp = self.gp and not tree_metric
        growth = float(deg - 1) ** radius if radius > 0 else 1.0
        self.reserve(int(min(srcs.size * growth * 2 + 16, 1 << 26)))
        while True:
            if self._mark is None or self._mark.shape[0] != self.capacity:
                self._mark = np.full(self.capacity, -1, dtype=np.int64)
            ids, dist = _arena_ball(*self.arena, srcs, int(radius), deg, gp, self._mark)
            self._index = None
            if ids.size or srcs.size == 0:
                return ids, dist
            self.reserve(2 * self.capacity)

    # public interface -------------------------------------------------
    @property
    def center_id(self) -> int:
        return 0

    def keys(self, ids) -> np.ndarray:
        return self.keys_arr[np.asarray(ids, dtype=np.int64)]

    def canon(self, ids) -> np.ndarray:
        return self.keys(ids)

    def vertex(self, i) -> TreeVertex:
        """Canonical vertex of an id (climbs to the ray through the origin)."""
        i = int(i)
        digits = []
        while not self.is_ray[i]:
            p = int(self.par[i])
            digits.append(int(np.nonzero(self.kids[p] == i)[0][0]))
            i = p
        v = TreeVertex(int(self.h[i]), "")
        for c in reversed(digits):
            v = self.tree.child(v, c)
        return v

    def _lookup(self):
        if self._index is None or self._index[2] != self.n:
            k = self.keys_arr[: self.n]
            order = np.argsort(k)
            self._index = (k[order], order, self.n)
        return self._index

    def id_of(self, v, materialise: bool = False) -> int:
        v = self.tree.validate(v)
        sk, order, _ = self._lookup()
        key = np.uint64(self.tree.key(v))
        pos = int(np.searchsorted(sk, key))
        if pos < sk.size and sk[pos] == key:
            return int(order[pos])
        if not materialise:
            raise KeyError(f"{v!r} is not materialised")
        p = self.id_of(self.tree.parent(v), materialise=True) if v.word else None
        if p is None:
            # a ray vertex: grow the ray from the top or from below
            return self._ray_id(v.h)
        return self.neighbor(p, 1 + self.tree.child_index(v))

    def _ray_id(self, hh: int) -> int:
        sk, order, _ = self._lookup()
        rays = np.nonzero(self.is_ray[: self.n])[0]
        hs = self.h[rays]
        if hh > hs.max():
            i = int(rays[np.argmax(hs)])
            while int(self.h[i]) < hh:
                i = self.neighbor(i, 0)
            return i
        i = int(rays[np.argmin(hs)])
        while int(self.h[i]) > hh:
            i = self.neighbor(i, 1)
        return i

    def ball_ids(self, radius: int) -> np.ndarray:
        if radius <= self.radius:
            n = self.n
            return np.nonzero(self.depth[:n] <= radius)[0].astype(np.int64)
        ids, _ = self.ball_around([0], radius, tree_metric=True)
        return np.sort(ids)

    def window_ids(self, window: Window, inner: bool = False) -> np.ndarray:
        if window.center is not None and self.tree.validate(window.center) != self.center:
            raise ValueError("tree windows are centred at the centre of the space")
        return self.ball_ids(window.inner if inner else window.radius)

    def sup_dist(self, ids, center=None) -> np.ndarray:
        return self.depth[np.asarray(ids, dtype=np.int64)]


def _grow(arr: np.ndarray, cap: int, fill=0) -> np.ndarray:
    out = np.full((cap,) + arr.shape[1:], fill, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


def make_space(family, radius: int | None = None, center=None):
    if isinstance(family, Lattice):
        sp = LatticeSpace(family)
        if center is not None:
            sp.center = tuple(center)
        return sp
    return TreeSpace(family, 0 if radius is None else radius, center)
