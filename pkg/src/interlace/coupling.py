"""Length-doubling maps for finite-length interlacements and the dyadic cascade.

``double_unlabeled`` turns a sample of ``P_{v,T}`` into a sample of
``P_{v/2,2T}``: split the trajectories by fair coins into ``X1`` and ``X2``,
match the terminal points of ``X1`` to the initial points of ``X2`` with the
soft local time matching at range ``L``, join each matched pair by a random
walk bridge of ``L`` steps and continue it with the matched ``X2``
trajectory (or a fresh walk when the partner is a phantom point).  The
joined trajectories have ``2T + L - 1`` vertices and the output keeps the
first ``2T``.

Every random choice is read from the random field at a vertex key, on a
lane named by the stage tag, with the member's rank among members sharing
that vertex as sublane.  The map is therefore a factor of the field and
commutes with lattice translations bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .graph import Grandparent, Lattice
from .harness.rng import RandomField, lane_id, philox_uniform, sublane
from .interlacement import sample_fli
from .pointproc import LocalImage, TrajectoryMeasure, local_distance, localize, member_ranks, occurrence_index
from .softlocaltime import MatchResult, slt_match
from .space import LatticeSpace, Window, make_space, tree_child, tree_parent
from .walk import LatticeKernelTable, tree_distance_profile, tree_sphere_sizes, walk_paths

__all__ = [
    "doubling_L",
    "double_unlabeled",
    "double_labeled",
    "DoublingTrace",
    "bad_event_probe",
    "bad_event_probe_many",
    "bad_event_bounds",
    "cascade",
    "CascadeReport",
    "cascade_levels",
    "equivariance_check",
    "translate_measure",
    "coupling_error_samples",
    "probe_centers",
    "default_margin",
    "sample_bridges",
]


def doubling_L(T: int, v: float) -> int:
    """Bridge length ``ceil(T^{4/7} v^{-2/7})``, exact for rational powers of two."""
    x = T ** (4 / 7) * v ** (-2 / 7)
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 * max(1.0, x) else int(math.ceil(x))


# ----------------------------------------------------------------------
# bridges


@nb.njit(cache=True)
def _lattice_bridges(xc, yc, keys, lanes, L, values, offsets, radii, binom, k0, k1, shift):
    """Bridges in coordinates: ``out[i, k]`` is the position after ``k`` steps."""
    n, d = xc.shape
    out = np.empty((n, L + 1, d), dtype=np.int64)
    z = np.empty(d, dtype=np.int64)
    a = np.empty(d, dtype=np.int64)
    w = np.empty(2 * d)
    for i in range(n):
        for c in range(d):
            out[i, 0, c] = xc[i, c]
        for k in range(L):
            m = L - k - 1
            tot = 0.0
            for j in range(2 * d):
                for c in range(d):
                    z[c] = yc[i, c] - out[i, k, c]
                z[j // 2] -= 1 if j % 2 == 0 else -1
                # sorted absolute coordinates, largest first
                for c in range(d):
                    t = abs(z[c])
                    e = c
                    while e > 0 and a[e - 1] < t:
                        a[e] = a[e - 1]
                        e -= 1
                    a[e] = t
                p = 0.0
                if a[0] <= radii[m]:
                    r = 0
                    for c in range(d):
                        r += binom[a[c] + d - 1 - c, d - c]
                    s = 0
                    for c in range(d):
                        s += a[c]
                    if s <= m and (m - s) % 2 == 0:
                        p = values[offsets[m] + r]
                w[j] = p
                tot += p
            if tot <= 0.0:
                return out, i
            u = philox_uniform(keys[i] - shift, lanes[i], k, k0, k1) * tot
            j = 0
            acc = w[0]
            while acc <= u and j < 2 * d - 1:
                j += 1
                acc += w[j]
            for c in range(d):
                out[i, k + 1, c] = out[i, k, c]
            out[i, k + 1, j // 2] += 1 if j % 2 == 0 else -1
    return out, -1


@nb.njit(cache=True)
def _tree_bridges(arena_keys, h, dep, par, kids, ray, cnt, xs, ys, keys, lanes, L, pv, d, k0, k1, shift):
    """Bridges on the d-regular tree driven by the per-vertex distance kernel ``pv[m, k]``."""
    n = xs.shape[0]
    out = np.empty((n, L + 1), dtype=np.int64)
    for i in range(n):
        u = xs[i]
        y = ys[i]
        out[i, 0] = u
        for k in range(L):
            m = L - k - 1
            # distance and direction of the step toward y
            a, b, dist = u, y, 0
            while h[a] < h[b]:
                a = par[a]
                dist += 1
            while h[b] < h[a]:
                b = par[b]
                dist += 1
            while a != b:
                a = par[a]
                b = par[b]
                dist += 2
            jt = -1
            if dist > 0:
                if a == u:
                    c = y
                    while par[c] != u:
                        c = par[c]
                    for q in range(d - 1):
                        if kids[u, q] == c:
                            jt = q + 1
                else:
                    jt = 0
            pt = pv[m, dist - 1] if dist > 0 else 0.0
            pa = pv[m, dist + 1] if dist + 1 <= m else 0.0
            n_away = d - 1 if dist > 0 else d
            tot = pt + n_away * pa
            if tot <= 0.0:
                return out, i
            r = philox_uniform(keys[i] - shift, lanes[i], k, k0, k1) * tot
            if r < pt:
                j = jt
            else:
                q = int((r - pt) / pa)
                if q > n_away - 1:
                    q = n_away - 1
                j = q if jt < 0 or q < jt else q + 1
            if j == 0:
                nxt = tree_parent(arena_keys, h, dep, par, kids, ray, cnt, u)
            else:
                nxt = tree_child(arena_keys, h, dep, par, kids, ray, cnt, u, j - 1)
            if nxt < 0:
                return out, -2 - i
            u = nxt
            out[i, k + 1] = u
    return out, -1


_TABLES: dict = {}


def _lattice_table(d: int, L: int) -> LatticeKernelTable:
    key = (d, L)
    if key not in _TABLES:
        if len(_TABLES) > 4:
            _TABLES.clear()
        _TABLES[key] = LatticeKernelTable(d, L)
    return _TABLES[key]


def sample_bridges(space, xs, ys, L: int, keys, lanes, field_: RandomField) -> np.ndarray:
    """Walk bridges of ``L`` steps from ``xs[i]`` to ``ys[i]`` (ids, shape ``(n, L + 1)``)."""
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    ys = np.ascontiguousarray(ys, dtype=np.int64)
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    lanes = np.ascontiguousarray(lanes, dtype=np.uint64)
    k0, k1 = field_.words
    if xs.size == 0:
        return np.zeros((0, L + 1), dtype=np.int64)
    if isinstance(space, LatticeSpace):
        tab = _lattice_table(space.d, L)
        out, bad = _lattice_bridges(space.coords(xs), space.coords(ys), keys, lanes, L, tab.values,
                                    tab.offsets, tab.radii, tab.binom, k0, k1, field_.shift_u64)
        if bad >= 0:
            raise AssertionError(f"bridge {bad} left the kernel support")
        return space.ids_of(out)
    if space.gp:
        raise NotImplementedError("bridges are implemented for lattices and regular trees")
    d = space.d
    q = tree_distance_profile(d, L)
    pv = q / tree_sphere_sizes(d, L)[None, :]
    while True:
        out, bad = _tree_bridges(*space.arena, xs, ys, keys, lanes, L, pv, d, k0, k1, field_.shift_u64)
        space._index = None
        if bad == -1:
            return out
        if bad >= 0:
            raise AssertionError(f"bridge {bad} left the kernel support")
        space.reserve(2 * space.capacity)


# ----------------------------------------------------------------------
# doubling


@dataclass
class DoublingTrace:
    """Intermediates of one doubling step (member arrays follow ``X1``'s order)."""

    T: int
    v: float
    L: int
    X: TrajectoryMeasure
    X1: TrajectoryMeasure
    X2: TrajectoryMeasure
    match: MatchResult | None
    bridges: TrajectoryMeasure
    continuation: TrajectoryMeasure
    joined: TrajectoryMeasure
    output: TrajectoryMeasure
    # index in X2 of the continuation of each X1 member; -1 fresh walk after a
    # phantom match, -2 free walk (terminal point outside the matching window)
    matched_x2: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def fresh(self) -> np.ndarray:
        return self.matched_x2 == -1

    @property
    def free(self) -> np.ndarray:
        return self.matched_x2 == -2

    @property
    def unmatched_x2(self) -> TrajectoryMeasure:
        used = np.zeros(len(self.X2), dtype=bool)
        used[self.matched_x2[self.matched_x2 >= 0]] = True
        return self.X2.select(~used)


def _canonical(X: TrajectoryMeasure) -> tuple[TrajectoryMeasure, np.ndarray]:
    order, occ = member_ranks(X)
    lab = None if X.labels is None else X.labels[order]
    return TrajectoryMeasure(X.space, X.paths[order], lab, X.window, dict(X.meta)), occ[order]


def _reversed_ranks(X: TrajectoryMeasure) -> tuple[np.ndarray, np.ndarray]:
    rev = TrajectoryMeasure(X.space, X.paths[:, ::-1], X.labels, X.window)
    return member_ranks(rev)


def double_unlabeled(family, X: TrajectoryMeasure, v: float, T: int, window: Window, field_: RandomField,
                     tag: str = "dbl.", check_hypothesis: bool = True,
                     slt_tol: float = 1e-3) -> tuple[TrajectoryMeasure, DoublingTrace]:
    """One doubling step ``P_{v,T} -> P_{v/2,2T}``.

    ``window`` is the window of ``X`` (members start inside it) and the
    matching runs on the same window.  A member of ``X1`` whose terminal
    point leaves the window is continued by a free walk of ``L + T - 1``
    steps, which keeps the output law exact; near the boundary the
    coupling is then looser, so local statistics are meaningful at
    distance about ``2T + 2L`` from the window edge.
    """
    if X.length != T:
        raise ValueError(f"input trajectories have {X.length} vertices, expected {T}")
    if check_hypothesis and not (T ** -1.5 - 1e-15 <= v <= T ** 2):
        raise ValueError("need T^{-3/2} <= v <= T^2")
    space = X.space
    L = doubling_L(T, v)
    X, occ = _canonical(X)
    keys0 = space.keys(X.paths[:, 0]) if len(X) else np.zeros(0, dtype=np.uint64)
    coin = field_.uniform(keys0, sublane(lane_id(tag + "coin"), occ)) < 0.5 if len(X) else np.zeros(0, bool)
    X1 = X.select(coin)
    X2 = X.select(~coin)
    # R1: terminal points of X1 in canonical order of the reversed members
    if len(X1):
        order1, _ = _reversed_ranks(X1)
        X1 = X1.select(order1)
    R1 = X1.paths[:, -1] if len(X1) else np.zeros(0, dtype=np.int64)
    R2 = X2.paths[:, 0] if len(X2) else np.zeros(0, dtype=np.int64)
    n1 = R1.size
    occ1 = occurrence_index(R1)
    inside = space.sup_dist(R1, window.center) <= window.radius if n1 else np.zeros(0, dtype=bool)
    br = np.empty((n1, L + 1), dtype=np.int64)
    cont = np.empty((n1, T), dtype=np.int64)
    matched = np.full(n1, -2, dtype=np.int64)
    match = None
    if np.any(inside):
        xi = R1[inside]
        match = slt_match(family, xi, R2, v / 2, L, window, field_, space, tol=slt_tol, tag=tag)
        ys = match.pair_y
        br[inside] = sample_bridges(space, xi, ys, L, space.keys(xi),
                                    sublane(lane_id(tag + "bridge"), occ1[inside]), field_)
        mi = match.pair_r2.copy()
        c_in = np.empty((xi.size, T), dtype=np.int64)
        real = mi >= 0
        c_in[real] = X2.paths[mi[real]]
        if np.any(~real):
            lanes = sublane(lane_id(tag + "fresh"), match.pair_arrival[~real])
            c_in[~real] = walk_paths(space, ys[~real], space.keys(ys[~real]), lanes, T, field_)
        cont[inside] = c_in
        matched[inside] = mi
    if np.any(~inside):
        # terminal point outside the matching window: a free walk replaces bridge and continuation
        xo = R1[~inside]
        free = walk_paths(space, xo, space.keys(xo), sublane(lane_id(tag + "free"), occ1[~inside]), L + T, field_)
        br[~inside] = free[:, : L + 1]
        cont[~inside] = free[:, L:]
    joined = np.concatenate([X1.paths, br[:, 1:], cont[:, 1:]], axis=1)
    out = TrajectoryMeasure(space, joined[:, : 2 * T], None, window, {"v": v / 2, "T": 2 * T})
    trace = DoublingTrace(T, v, L, X, X1, X2, match,
                          TrajectoryMeasure(space, br, None, window),
                          TrajectoryMeasure(space, cont, None, window),
                          TrajectoryMeasure(space, joined, None, window),
                          out, matched, {"tag": tag})
    return out, trace


# ----------------------------------------------------------------------
# bad events


_TRACE_MEASURES = ("X", "X1", "X2", "bridges", "continuation", "joined", "output")


def _events(lam: dict) -> dict:
    e3 = len(lam["bridges"]) != 0
    return {
        "i": lam["X"] != lam["X1"] + lam["X2"],
        "ii": lam["X2"] != lam["continuation"],
        "iii": e3,
        "iv": (not e3) and (lam["X1"] + lam["continuation"] != lam["joined"]),
        "v": lam["joined"] != lam["output"],
        "differ": lam["X"] != lam["output"],
    }


def bad_event_probe(trace: DoublingTrace, K) -> dict:
    """The five local discrepancy events of one doubling step on ``K``.

    (i) ``L(X) != L(X1) + L(X2)``; (ii) ``L(X2) != L(X2hat)`` where
    ``X2hat`` are the continuations; (iii) some bridge visits ``K``;
    (iv) no bridge visits ``K`` and ``L(X1) + L(X2hat) != L(X'')``;
    (v) ``L(X'') != L(output)``.  ``L`` is the local image on ``K``;
    ``differ`` records ``L(X) != L(output)``.
    """
    return _events({name: localize(getattr(trace, name), K) for name in _TRACE_MEASURES})


def bad_event_probe_many(trace: DoublingTrace, Ks) -> list[dict]:
    """``bad_event_probe`` for several sets at once (members are screened in one pass)."""
    space = trace.X.space
    fam = space.family
    kkeys = [np.array([fam.key(k) for k in K], dtype=np.uint64) for K in Ks]
    allk = np.unique(np.concatenate(kkeys)) if kkeys else np.zeros(0, dtype=np.uint64)
    hits = {}
    for name in _TRACE_MEASURES:
        X = getattr(trace, name)
        if len(X) == 0:
            hits[name] = (X, np.zeros((0, X.length), dtype=np.uint64))
            continue
        canon = space.canon(X.paths)
        rows = np.nonzero(np.isin(canon, allk).any(axis=1))[0]
        hits[name] = (X.select(rows), canon[rows])
    out = []
    for K, kk in zip(Ks, kkeys):
        lam = {}
        for name, (sub, canon) in hits.items():
            rows = np.isin(canon, kk).any(axis=1) if len(sub) else np.zeros(0, dtype=bool)
            lam[name] = localize(sub.select(rows), K)
        out.append(_events(lam))
    return out


def bad_event_bounds(family, T: int, v: float, k: int) -> dict:
    """Upper bounds for events (ii), (iii) and (v) with ``|K| = k`` (event (iv) has an unquantified constant)."""
    from .walk import heat_kernel_profile

    L = doubling_L(T, v)
    p2L = float(heat_kernel_profile(family, 2 * L).p[2 * L])
    return {
        "ii": 2 * k * T * math.sqrt(v * p2L),
        "iii": v / 2 * k * (L + 1),
        "v": v / 2 * k * (L - 1),
        "L": L,
    }


# ----------------------------------------------------------------------
# labeled doubling and the cascade


def double_labeled(family, Z: TrajectoryMeasure, T: int, m: int, window: Window, field_: RandomField,
                   tag: str = "lab.", slt_tol: float = 1e-3) -> tuple[TrajectoryMeasure, list]:
    """Labeled doubling ``Q_T -> Q_{2T}`` with ``m`` label bands.

    Members with labels in band ``b`` (``[b/m, (b+1)/m)``) form a sample of
    ``P_{1/(Tm),T}``; each band is doubled separately and its output gets
    fresh uniform labels inside the band.  Returns the output and the
    per-band traces.
    """
    if Z.labels is None:
        raise ValueError("labeled input required")
    if not 1 <= m <= math.isqrt(T) and not (T == 1 and m == 1):
        raise ValueError("need 1 <= m <= sqrt(T)")
    band = np.minimum((Z.labels * m).astype(np.int64), m - 1)
    paths, labels, traces = [], [], []
    for b in range(m):
        Zb = Z.select(band == b).drop_labels()
        btag = f"{tag}b{b}."
        out, tr = double_unlabeled(family, Zb, 1.0 / (T * m), T, window, field_, tag=btag, slt_tol=slt_tol)
        if len(out):
            _, occ = member_ranks(out)
            u = field_.uniform(out.space.keys(out.paths[:, 0]), sublane(lane_id(btag + "relabel"), occ))
            lab = (b + u) / m
        else:
            lab = np.zeros(0)
        paths.append(out.paths)
        labels.append(lab)
        traces.append(tr)
    P = np.concatenate(paths) if paths else np.zeros((0, 2 * T), dtype=np.int64)
    return TrajectoryMeasure(Z.space, P, np.concatenate(labels), window, {"T": 2 * T}), traces


def cascade_levels(n_max: int) -> list[tuple[int, int, int]]:
    """``(n, T_n, m_n)`` with ``T_n = 2^n`` and ``m_n = floor(T_n^{1/4})``."""
    out = []
    for n in range(n_max):
        T = 2 ** n
        m = math.isqrt(math.isqrt(T))
        out.append((n, T, m))
    return out


@dataclass
class CascadeReport:
    levels: list  # (n, T_n, m_n)
    distances: list  # d_K(Z^n, Z^{n+1}) for n < n_max
    images: list  # local images of Z^n on K
    top: TrajectoryMeasure
    sizes: list

    def to_rows(self) -> list[dict]:
        return [{"n": n, "T": T, "m": m, "d_K": d, "members": s}
                for (n, T, m), d, s in zip(self.levels, self.distances, self.sizes)]


def cascade(family, n_max: int, K, field_: RandomField, window: Window | None = None, space=None,
            slt_tol: float = 1e-3, keep_levels: bool = False) -> CascadeReport:
    """``Z^0 ~ Q_1`` doubled ``n_max`` times; ``d_K`` between consecutive levels.

    On a lattice the default window has radius ``2^{n_max} + 2 L_max + 4``
    around the origin, enough for the local images on a small ``K`` to be
    free of boundary effects up to exponentially small probabilities.  On
    a tree a walk needs about ``3 r`` steps to come back from distance
    ``r``, so the default radius is ``2^{n_max} / 3 + 8``; the tree ball and
    the matching supports still grow exponentially with the radius, which
    limits tree cascades to about ``n_max = 4`` in a few GB of memory.
    """
    levels = cascade_levels(n_max)
    if window is None and isinstance(family, Lattice):
        Lmax = max((doubling_L(T, 1.0 / (T * m)) for _, T, m in levels), default=1)
        window = Window(2 ** n_max + 2 * Lmax + 4)
    elif window is None:
        window = Window(2 ** n_max // 3 + 8)
    space = space if space is not None else make_space(family, window.radius)
    Z = sample_fli(family, 1.0, 1, window, field_, space, label_lane="cascade.z0.label")
    Z, _ = _canonical(Z)
    images = [localize(Z, K)]
    dists, sizes = [], []
    for n, T, m in levels:
        Z2, _ = double_labeled(family, Z, T, m, window, field_, tag=f"cas{n}.", slt_tol=slt_tol)
        images.append(localize(Z2, K))
        dists.append(local_distance(images[-2], images[-1], K))
        sizes.append(len(Z2))
        Z = Z2
    return CascadeReport(levels, dists, images, Z, sizes)


# ----------------------------------------------------------------------
# translation equivariance


def translate_measure(X: TrajectoryMeasure, g) -> TrajectoryMeasure:
    sp = X.space
    return TrajectoryMeasure(sp, sp.translate_ids(X.paths, g), X.labels, X.window, dict(X.meta))


def _sorted_rows(X: TrajectoryMeasure) -> bytes:
    P = X.paths
    cols = [P[:, t] for t in range(P.shape[1] - 1, -1, -1)]
    if X.labels is not None:
        cols = [X.labels] + cols
    order = np.lexsort(cols) if len(X) else np.zeros(0, dtype=np.int64)
    blob = P[order].tobytes()
    if X.labels is not None:
        blob += X.labels[order].tobytes()
    return blob


def equivariance_check(family, pipeline, gamma, field_: RandomField, window: Window) -> bool:
    """Run ``pipeline(field, window)`` and again on the translated field and window.

    The second run uses the field shifted by ``gamma`` (so the randomness
    at ``x + gamma`` equals the original randomness at ``x``) and the
    window translated by ``gamma``; the test passes iff its output equals
    the first output translated by ``gamma``, compared byte for byte
    after sorting the members.
    """
    if not isinstance(family, Lattice):
        raise TypeError("translation equivariance is checked on lattices")
    gamma = tuple(int(c) for c in gamma)
    c0 = window.center if window.center is not None else family.origin()
    w2 = Window(window.radius, window.inner, tuple(int(a) + b for a, b in zip(c0, gamma)))
    a = pipeline(field_, window)
    b = pipeline(field_.shifted(family.translation_code(gamma)), w2)
    return _sorted_rows(translate_measure(a, gamma)) == _sorted_rows(b)


# ----------------------------------------------------------------------
# coupling error estimates


def default_margin(T: int, v: float) -> int:
    """Distance from a probe vertex to the window edge: about four spreads of a joined walk."""
    return int(math.ceil(4 * math.sqrt(2 * T + doubling_L(T, v)))) + 8


def probe_centers(d: int, spacing: int, count_per_axis: int) -> list[tuple]:
    """Grid of ``count_per_axis^d`` probe vertices with the given spacing, centred at the origin."""
    half = (count_per_axis - 1) * spacing / 2
    axis = [int(round(-half + k * spacing)) for k in range(count_per_axis)]
    grids = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return [tuple(int(c) for c in row) for row in grids]


def coupling_error_samples(family, T: int, v: float, field_: RandomField, centers, margin: int | None = None,
                           space=None, slt_tol: float = 1e-3) -> list[dict]:
    """Bad-event indicators of one doubling step for ``K = {c}`` at each probe vertex ``c``.

    One sample of ``P_{v,T}`` is drawn on a window reaching ``margin``
    beyond the probes and doubled once; by translation invariance each
    probe gives a sample of the events for a singleton ``K``.
    """
    if not isinstance(family, Lattice):
        raise TypeError("probe grids are defined on lattices")
    margin = default_margin(T, v) if margin is None else margin
    reach = max(max(abs(c) for c in ctr) for ctr in centers)
    W = Window(reach + margin)
    space = space if space is not None else make_space(family)
    X = sample_fli(family, v, T, W, field_, space)
    _, tr = double_unlabeled(family, X, v, T, W, field_, slt_tol=slt_tol)
    return bad_event_probe_many(tr, [[c] for c in centers])
