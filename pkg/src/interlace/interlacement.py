"""Samplers for finite-length interlacements, their labeled version, local
windows of random interlacements, and the interlacement Aldous-Broder forest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Lattice
from .harness.rng import RandomField, lane_id, sublane
from .pointproc import LocalImage, TrajectoryMeasure, occurrence_index
from .potential import escape_table, singleton_escape
from .space import LatticeSpace, TreeSpace, Window, make_space
from .walk import heat_kernel_profile, walk_paths

__all__ = [
    "sample_fli",
    "sample_fli_labeled",
    "sample_ri_local",
    "RISample",
    "wusf_from_ri",
    "WUSF",
    "first_entry_edges",
    "LANES",
]

LANES = {
    name: lane_id(name)
    for name in ("fli.count", "fli.walk", "fli.label", "ri.count", "ri.back", "ri.fwd", "ri.label")
}


def _space(family, space, radius: int):
    if space is not None:
        return space
    return make_space(family, radius)


def _k_radius(space, family, K, center) -> int:
    ids = np.array([space.id_of(k, materialise=True) if isinstance(space, TreeSpace) else space.id_of(k)
                    for k in K], dtype=np.int64)
    return int(space.sup_dist(ids, center).max())


def sample_fli(family, v: float, T: int, window: Window, field_: RandomField, space=None,
               K=None, label_lane: str | None = None) -> TrajectoryMeasure:
    """Finite-length interlacement of intensity ``v`` and length ``T``.

    Every vertex ``x`` of the window receives ``N_x ~ Poisson(v)``
    trajectories, each a simple random walk with ``T`` vertices; member
    ``j`` at ``x`` walks with the ``j``-th sublane of ``x``'s walk stream.
    If ``K`` is given, the window must be large enough that the local image
    on ``K`` is exact (radius at least radius(K) + T - 1).
    """
    if v < 0 or T < 1:
        raise ValueError("need v >= 0 and T >= 1")
    space = _space(family, space, window.radius)
    if K is not None:
        need = _k_radius(space, family, K, window.center) + T - 1
        if window.radius < need:
            raise ValueError(f"window radius {window.radius} too small for exactness on K (need {need})")
    ids = space.window_ids(window)
    keys = space.keys(ids)
    counts = field_.poisson(keys, LANES["fli.count"], v) if v > 0 else np.zeros(ids.size, dtype=np.int64)
    starts = np.repeat(ids, counts)
    mkeys = np.repeat(keys, counts)
    occ = occurrence_index(starts)
    lanes = sublane(LANES["fli.walk"], occ)
    paths = walk_paths(space, starts, mkeys, lanes, T, field_)
    labels = None
    if label_lane is not None:
        labels = field_.uniform(mkeys, sublane(lane_id(label_lane), occ))
    return TrajectoryMeasure(space, paths, labels, window, {"v": v, "T": T, "counts": counts, "ids": ids})


def sample_fli_labeled(family, T: int, window: Window, field_: RandomField, space=None, K=None) -> TrajectoryMeasure:
    """Labeled finite-length interlacement: intensity ``1/T`` with uniform labels."""
    return sample_fli(family, 1.0 / T, T, window, field_, space, K, label_lane="fli.label")


@dataclass
class RISample:
    """Local window of a random interlacement on K.

    ``image`` holds the local images of the kept double walks, ``starts``
    and ``kept`` the number of double walks started and kept per vertex of
    K, ``visits`` the number of visits to K by each kept trajectory.
    """

    image: LocalImage
    K: list
    starts: np.ndarray
    kept: np.ndarray
    visits: np.ndarray
    labels: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_kept(self) -> int:
        return int(self.kept.sum())


def ri_diagnostics(family, K, u: float, s_bwd: int, s_fwd: int) -> dict:
    """Deterministic truncation diagnostics for ``sample_ri_local``.

    ``e_gap[x] = e_K^{s}(x) - e_K^{2s}(x)`` at the backward horizon,
    ``fwd_residual[x]`` the same gap at the forward horizon (a proxy for
    the chance of a return after the forward horizon), and for a single
    point the exact expected number of visits ``u e^{s_bwd}(o) G^{s_fwd}(o, o)``.
    """
    ks = sorted(family.validate(k) for k in K)
    out: dict = {}
    if len(ks) == 1:
        e = singleton_escape(family, 2 * max(s_bwd, s_fwd))[None, :]
    else:
        e = escape_table(family, ks, 2 * max(s_bwd, s_fwd))
    out["e_trunc"] = e[:, s_bwd].tolist()
    out["e_gap"] = (e[:, s_bwd] - e[:, 2 * s_bwd]).tolist()
    out["fwd_residual"] = (e[:, s_fwd] - e[:, 2 * s_fwd]).tolist()
    out["expected_kept"] = float(u * e[:, s_bwd].sum())
    if len(ks) == 1:
        p = heat_kernel_profile(family, s_fwd).p
        out["green_trunc"] = float(p.sum())
        out["expected_visits"] = float(u * e[0, s_bwd] * p.sum())
    return out


def sample_ri_local(family, u: float, K, s_bwd: int, s_fwd: int, field_: RandomField, space=None,
                    diagnostics: bool = False) -> RISample:
    """Local image on K of the random interlacement at level ``u``.

    From each ``x`` in K start ``Poisson(u)`` double walks; keep those whose
    backward part avoids K at times ``1..s_bwd`` and return the forward part
    up to its last visit to K (within ``s_fwd`` steps).  Labels are uniform
    on ``[0, u]`` rescaled to ``[0, 1]``.
    """
    ks = sorted(family.validate(k) for k in K)
    if space is None:
        space = make_space(family, 2)
    if isinstance(space, TreeSpace):
        kid = np.array([space.id_of(k, materialise=True) for k in ks], dtype=np.int64)
    else:
        kid = np.array([space.id_of(k) for k in ks], dtype=np.int64)
    keys = space.keys(kid)
    counts = field_.poisson(keys, LANES["ri.count"], u) if u > 0 else np.zeros(kid.size, dtype=np.int64)
    starts = np.repeat(kid, counts)
    mkeys = np.repeat(keys, counts)
    occ = occurrence_index(starts)
    back = walk_paths(space, starts, mkeys, sublane(LANES["ri.back"], occ), s_bwd + 1, field_)
    inK_b = np.isin(back[:, 1:], kid).any(axis=1)
    keep = ~inK_b
    fwd = walk_paths(space, starts[keep], mkeys[keep], sublane(LANES["ri.fwd"], occ[keep]), s_fwd + 1, field_)
    labels = field_.uniform(mkeys[keep], sublane(LANES["ri.label"], occ[keep]))
    canon = space.canon(fwd)
    kkeys = space.canon(kid)
    hit = np.isin(canon, kkeys)
    visits = hit.sum(axis=1)
    members = []
    for r in range(fwd.shape[0]):
        last = int(np.nonzero(hit[r])[0][-1])
        members.append((tuple(int(x) for x in canon[r, : last + 1]), float(labels[r])))
    kept = np.repeat(np.arange(kid.size), counts)[keep]
    kept = np.bincount(kept, minlength=kid.size)
    diag = ri_diagnostics(family, ks, u, s_bwd, s_fwd) if diagnostics else {}
    return RISample(LocalImage(members, space.family), ks, counts, kept, visits, labels, diag)


# ----------------------------------------------------------------------
# Aldous-Broder forest


def first_entry_edges(path) -> dict:
    """For each vertex of ``path`` after the first, the edge of its first entrance.

    Returns ``{y: previous vertex}``; the start vertex gets no edge.
    """
    out = {}
    seen = {path[0]}
    for a, b in zip(path[:-1], path[1:]):
        if b not in seen:
            seen.add(b)
            out[b] = a
    return out


@dataclass
class WUSF:
    """Oriented first-entry edges ``parent[y]`` on the covered inner vertices."""

    space: object
    inner: np.ndarray
    parent: dict
    uncovered: list
    trajectories: int

    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.parent.items())

    def out_degrees(self) -> dict:
        deg: dict = {}
        for y in self.parent:
            deg[y] = deg.get(y, 0) + 1
        return deg

    def has_cycle(self) -> bool:
        """Follow parent pointers from every covered vertex; detect a cycle."""
        state: dict = {}
        for y0 in self.parent:
            path = []
            y = y0
            while y in self.parent and y not in state:
                state[y] = 1
                path.append(y)
                y = self.parent[y]
                if state.get(y) == 1 and y in path:
                    return True
            for z in path:
                state[z] = 2
        return False


def wusf_from_ri(family, u: float, window: Window, field_: RandomField, s_bwd: int = 200,
                 s_fwd: int = 200, space=None) -> WUSF:
    """Interlacement Aldous-Broder: keep, at every inner vertex, the first-entry
    edge of the smallest-label trajectory visiting it.

    Trajectories hitting the window are sampled with ``sample_ri_local`` on
    the whole window (so the first entrance into the window is the start of
    the forward part and the preceding vertex is the backward step).  Each
    covered inner vertex ``y`` points to the vertex visited just before the
    first visit to ``y``.
    """
    space = space if space is not None else make_space(family, window.radius)
    kid = np.sort(space.window_ids(window))
    inner = space.window_ids(window, inner=True)
    keys = space.keys(kid)
    counts = field_.poisson(keys, LANES["ri.count"], u)
    starts = np.repeat(kid, counts)
    mkeys = np.repeat(keys, counts)
    occ = occurrence_index(starts)
    back = walk_paths(space, starts, mkeys, sublane(LANES["ri.back"], occ), s_bwd + 1, field_)
    keep = ~np.isin(back[:, 1:], kid).any(axis=1)
    fwd = walk_paths(space, starts[keep], mkeys[keep], sublane(LANES["ri.fwd"], occ[keep]), s_fwd + 1, field_)
    labels = field_.uniform(mkeys[keep], sublane(LANES["ri.label"], occ[keep]))
    prev = np.concatenate([back[keep][:, 1:2], fwd[:, :-1]], axis=1)
    inner_set = np.sort(inner)
    n, L = fwd.shape
    flat_v = fwd.ravel()
    flat_p = prev.ravel()
    flat_lab = np.repeat(labels, L)
    flat_t = np.tile(np.arange(L), n)
    m = np.isin(flat_v, inner_set)
    fv, fp, fl, ft = flat_v[m], flat_p[m], flat_lab[m], flat_t[m]
    order = np.lexsort((ft, fl, fv))
    fv, fp = fv[order], fp[order]
    first = np.ones(fv.size, dtype=bool)
    first[1:] = fv[1:] != fv[:-1]
    parent = {int(a): int(b) for a, b in zip(fv[first], fp[first])}
    uncovered = [int(y) for y in inner_set if int(y) not in parent]
    return WUSF(space, inner_set, parent, uncovered, int(n))
