"""Finite trajectory multisets, local images, shears and the local distance."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TrajectoryMeasure",
    "LocalImage",
    "localize",
    "shear",
    "w1_empirical",
    "local_distance",
]


@dataclass
class TrajectoryMeasure:
    """A finite multiset of equal-length trajectories in integer-id form.

    ``paths[i]`` is member ``i`` (ids of ``space``), ``labels[i]`` its
    label in ``[0, 1]`` or ``labels is None`` when unlabeled.  ``window``
    records the region the sample is exact for.
    """

    space: object
    paths: np.ndarray
    labels: np.ndarray | None = None
    window: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.paths = np.asarray(self.paths, dtype=np.int64)
        if self.paths.ndim != 2:
            self.paths = self.paths.reshape(-1, max(1, self.paths.shape[-1] if self.paths.ndim else 1))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=float)
            if self.labels.shape != (self.paths.shape[0],):
                raise ValueError("one label per member")

    def __len__(self) -> int:
        return self.paths.shape[0]

    @property
    def length(self) -> int:
        return self.paths.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def starts(self) -> np.ndarray:
        return self.paths[:, 0]

    def ends(self) -> np.ndarray:
        return self.paths[:, -1]

    def trajectories(self) -> list[tuple]:
        vx = self.space.vertex
        return [tuple(vx(i) for i in row) for row in self.paths]

    def start_counts(self, ids) -> np.ndarray:
        """Number of members starting at each of the given ids."""
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(ids)
        s = np.searchsorted(ids[order], self.starts())
        s = np.clip(s, 0, len(ids) - 1)
        ok = ids[order][s] == self.starts()
        cnt = np.bincount(s[ok], minlength=len(ids))
        out = np.empty(len(ids), dtype=np.int64)
        out[order] = cnt
        return out

    def drop_labels(self) -> "TrajectoryMeasure":
        return TrajectoryMeasure(self.space, self.paths, None, self.window, dict(self.meta))

    def select(self, mask) -> "TrajectoryMeasure":
        lab = None if self.labels is None else self.labels[mask]
        return TrajectoryMeasure(self.space, self.paths[mask], lab, self.window, dict(self.meta))

    def __add__(self, other: "TrajectoryMeasure") -> "TrajectoryMeasure":
        if self.length != other.length:
            raise ValueError("length mismatch")
        if (self.labels is None) != (other.labels is None):
            raise ValueError("cannot add labeled and unlabeled measures")
        lab = None if self.labels is None else np.concatenate([self.labels, other.labels])
        return TrajectoryMeasure(self.space, np.concatenate([self.paths, other.paths]), lab, self.window)

    def to_json(self) -> str:
        fam = self.space.family
        out = []
        for k, row in enumerate(self.paths):
            item = {"path": [fam.to_json(self.space.vertex(i)) for i in row]}
            if self.labels is not None:
                item["label"] = float(self.labels[k])
            out.append(item)
        return json.dumps(out)


class LocalImage:
    """Multiset of (trajectory through K, label) pairs.

    Each trajectory starts and ends in K; the label is ``None`` for
    unlabeled images.  When ``family`` is given the trajectories are
    tuples of canonical vertex keys (``family.key``), which is how images
    of simulated measures are stored; otherwise they are tuples of vertices.
    """

    def __init__(self, members=None, family=None):
        self.members: list[tuple[tuple, float | None]] = list(members or [])
        self.family = family

    @property
    def keyed(self) -> bool:
        return self.family is not None

    def __len__(self) -> int:
        return len(self.members)

    def __add__(self, other: "LocalImage") -> "LocalImage":
        if self.keyed != other.keyed:
            raise ValueError("cannot add keyed and vertex images")
        return LocalImage(self.members + other.members, self.family)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LocalImage):
            return NotImplemented
        return Counter(self.members) == Counter(other.members)

    def __repr__(self) -> str:
        return f"LocalImage({self.members!r})"

    def shapes(self) -> Counter:
        return Counter(p for p, _ in self.members)

    def labels_by_shape(self) -> dict:
        out = defaultdict(list)
        for p, lab in self.members:
            out[p].append(0.0 if lab is None else lab)
        return out

    def key_set(self, K) -> set:
        if self.keyed:
            return {self.family.key(k) for k in K}
        return set(K)

    def vertex_members(self, space=None) -> list:
        """Members with vertices (a space resolves tree keys)."""
        if not self.keyed:
            return list(self.members)
        if space is None:
            if not hasattr(self.family, "from_key"):
                raise ValueError("a space is needed to resolve tree keys")
            conv = self.family.from_key
        else:
            sk, order, _ = space._lookup()

            def conv(k):
                return space.vertex(int(order[np.searchsorted(sk, np.uint64(k))]))
        return [(tuple(conv(k) for k in p), lab) for p, lab in self.members]

    def to_json(self, family, space=None) -> str:
        mem = self.vertex_members(space)
        return json.dumps([{"path": [family.to_json(v) for v in p], "label": lab} for p, lab in mem])

    @classmethod
    def from_json(cls, family, text: str) -> "LocalImage":
        data = json.loads(text)
        return cls([(tuple(family.from_json(v) for v in m["path"]), m.get("label")) for m in data])


def _localize_path(path, kset, label):
    hit = [i for i, v in enumerate(path) if v in kset]
    if not hit:
        return None
    return (tuple(path[hit[0]:hit[-1] + 1]), label)


def localize(omega, K) -> LocalImage:
    """Local image on K: members hitting K cut to [first entrance, last visit]."""
    if isinstance(omega, TrajectoryMeasure):
        return _localize_measure(omega, K)
    if isinstance(omega, LocalImage):
        items = omega.members
        kset = omega.key_set(K)
        fam = omega.family
    else:
        items = [(tuple(omega), None)]
        kset = set(K)
        fam = None
    out = []
    for p, lab in items:
        m = _localize_path(p, kset, lab)
        if m is not None:
            out.append(m)
    return LocalImage(out, fam)


def _localize_measure(omega: TrajectoryMeasure, K) -> LocalImage:
    space = omega.space
    fam = space.family
    kkeys = np.array([fam.key(k) for k in K], dtype=np.uint64)
    if len(omega) == 0 or kkeys.size == 0:
        return LocalImage([], fam)
    canon = space.canon(omega.paths)
    inK = np.isin(canon, kkeys)
    rows = np.nonzero(inK.any(axis=1))[0]
    out = []
    for r in rows:
        hits = np.nonzero(inK[r])[0]
        seg = canon[r, hits[0]:hits[-1] + 1]
        lab = None if omega.labels is None else float(omega.labels[r])
        out.append((tuple(int(x) for x in seg), lab))
    return LocalImage(out, fam)


def shear(omega, mode: str, n: int):
    """Member-wise prefix (``initial``), suffix (``terminal``) or single step (``step``).

    ``initial``/``terminal`` keep ``n`` vertices; ``step`` keeps the vertex
    at time ``n`` (a point measure, returned as an id array or a list).
    """
    if isinstance(omega, TrajectoryMeasure):
        Tp = omega.length
        if mode == "step":
            if not 0 <= n <= Tp - 1:
                raise ValueError("length mismatch")
            return omega.paths[:, n].copy()
        if mode not in ("initial", "terminal"):
            raise ValueError(f"unknown mode {mode!r}")
        if not 1 <= n <= Tp:
            raise ValueError("length mismatch")
        sl = slice(0, n) if mode == "initial" else slice(Tp - n, Tp)
        return TrajectoryMeasure(omega.space, omega.paths[:, sl], omega.labels, omega.window)
    paths = list(omega)
    out = []
    for p in paths:
        if mode == "step":
            if not 0 <= n <= len(p) - 1:
                raise ValueError("length mismatch")
            out.append(p[n])
        elif mode in ("initial", "terminal"):
            if not 1 <= n <= len(p):
                raise ValueError("length mismatch")
            out.append(tuple(p[:n]) if mode == "initial" else tuple(p[len(p) - n:]))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return out


def w1_empirical(a, b) -> float:
    """Wasserstein-1 distance between two equal-size empirical measures on [0, 1]."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size != b.size or a.size == 0:
        raise ValueError("need two nonempty multisets of equal cardinality")
    return float(np.mean(np.abs(a - b)))


def local_distance(omega, omega2, K) -> float:
    """``d_K``: 1 if some shape count differs, else the largest label W1 over shapes."""
    a = localize(omega, K)
    b = localize(omega2, K)
    if a.shapes() != b.shapes():
        return 1.0
    la, lb = a.labels_by_shape(), b.labels_by_shape()
    best = 0.0
    for w in la:
        best = max(best, w1_empirical(la[w], lb[w]))
    return best


def occurrence_index(groups: np.ndarray) -> np.ndarray:
    """Occurrence number of each entry within its group, in array order."""
    groups = np.asarray(groups)
    n = groups.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(groups, kind="stable")
    g = groups[order]
    first = np.ones(n, dtype=bool)
    first[1:] = g[1:] != g[:-1]
    starts = np.nonzero(first)[0]
    run = np.arange(n) - np.repeat(starts, np.diff(np.append(starts, n)))
    out = np.empty(n, dtype=np.int64)
    out[order] = run
    return out


def member_ranks(omega: TrajectoryMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Canonical member order and the occurrence index of each member.

    Members are grouped by the key of their start vertex and, inside a
    group, ordered by their path relative to the start (lattice
    displacements, tree vertex keys) and then by label.  The result depends
    only on the multiset, and on a lattice it is unchanged by translations,
    so randomness keyed by (start key, occurrence) is equivariant.

    Returns ``(order, occ)`` where ``order`` lists member indices in
    canonical order and ``occ[i]`` is member ``i``'s rank in its group.
    """
    n = len(omega)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    sp = omega.space
    canon = sp.canon(omega.paths)
    start = canon[:, 0]
    if hasattr(sp, "offs") and sp.nbr.shape[0] == 0 and not hasattr(sp, "arena"):
        rel = (omega.paths - omega.paths[:, :1]).astype(np.int64)
    else:
        rel = canon.view(np.int64)
    cols = [] if omega.labels is None else [omega.labels]
    cols += [rel[:, t] for t in range(rel.shape[1] - 1, 0, -1)]
    cols.append(start)
    order = np.lexsort(cols)
    occ = np.empty(n, dtype=np.int64)
    occ[order] = occurrence_index(start[order])
    return order, occ
