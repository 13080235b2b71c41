"""Transitive graph families, vertex coordinates, distances and the atlas.

Three families are provided:

* ``Lattice(d)``: the hypercubic lattice Z^d, vertices are integer tuples.
* ``RegularTree(d)``: the d-regular tree.  A distinguished end is fixed so
  that every vertex has one parent (towards the end) and ``d - 1``
  children.  A vertex is ``TreeVertex(h, word)`` where ``h`` is the height
  (it grows towards the end) and ``word`` spells the child indices met when
  descending from the reference ray ``r_k = TreeVertex(k, "")``.  The ray
  vertex ``r_{k-1}`` is child ``0`` of ``r_k``, so a non-empty word never
  starts with ``"0"``; this makes identifiers canonical.
* ``Grandparent(d)``: the same tree with every vertex also joined to its
  grandparent.  It is transitive but not unimodular.

Vertices are materialised lazily: nothing about the infinite graph is ever
stored, every operation is coordinate arithmetic.
"""

from __future__ import annotations

import itertools
import re
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .harness.rng import RandomField, lane_id, mix64_py

__all__ = [
    "TreeVertex",
    "Lattice",
    "RegularTree",
    "Grandparent",
    "make_family",
    "neighbors",
    "distance",
    "Chart",
    "greedy_atlas_chart",
    "verify_chart",
]

_RAY_SALT = 0x7E3EA11C5EED
_MASK64 = (1 << 64) - 1


class TreeVertex(NamedTuple):
    h: int
    word: str = ""


class Lattice:
    """The lattice Z^d with nearest-neighbour edges.

    Neighbour order is ``+e1, -e1, +e2, -e2, ...``.  Vertex keys pack the
    coordinates into one signed 64-bit integer (``bits // d`` bits per
    coordinate), so a translation acts on keys by adding a constant.
    """

    kind = "lattice"

    def __init__(self, d: int = 3):
        if d < 1:
            raise ValueError("dimension must be positive")
        self.d = d
        self.degree = 2 * d
        self.bits = 63 // d
        self.bias = 1 << (self.bits - 1)
        self.name = f"z{d}"

    def __repr__(self) -> str:
        return f"Lattice({self.d})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Lattice) and other.d == self.d

    def __hash__(self) -> int:
        return hash(("lattice", self.d))

    def origin(self) -> tuple:
        return (0,) * self.d

    def validate(self, v) -> tuple:
        if not isinstance(v, tuple) or len(v) != self.d:
            raise ValueError(f"malformed lattice vertex {v!r}")
        if not all(isinstance(c, (int, np.integer)) for c in v):
            raise ValueError(f"malformed lattice vertex {v!r}")
        if any(abs(int(c)) >= self.bias for c in v):
            raise ValueError(f"lattice vertex {v!r} outside the coordinate range")
        return tuple(int(c) for c in v)

    def neighbors(self, v) -> list[tuple]:
        v = self.validate(v)
        out = []
        for i in range(self.d):
            for s in (1, -1):
                w = list(v)
                w[i] += s
                out.append(tuple(w))
        return out

    def distance(self, u, v) -> int:
        u, v = self.validate(u), self.validate(v)
        return sum(abs(a - b) for a, b in zip(u, v))

    def key(self, v) -> int:
        v = self.validate(v)
        return sum((c + self.bias) << (self.bits * i) for i, c in enumerate(v))

    def from_key(self, code: int) -> tuple:
        mask = (1 << self.bits) - 1
        return tuple(((int(code) >> (self.bits * i)) & mask) - self.bias for i in range(self.d))

    def translation_code(self, g) -> int:
        """Key offset of the translation by ``g`` (may be negative)."""
        return sum(int(c) << (self.bits * i) for i, c in enumerate(g))

    def translate(self, v, g) -> tuple:
        return tuple(int(a) + int(b) for a, b in zip(v, g))

    def ball(self, center, radius: int) -> list[tuple]:
        return _bfs_ball(self, center, radius)

    def to_json(self, v):
        return [int(c) for c in v]

    def from_json(self, obj) -> tuple:
        return self.validate(tuple(int(c) for c in obj))


class RegularTree:
    """The d-regular tree with a distinguished end (see module docstring).

    Neighbour order is ``parent, child 0, ..., child d-2``.
    """

    kind = "tree"

    def __init__(self, d: int = 3):
        if d < 3 or d > 11:
            raise ValueError("tree degree must be in 3..11")
        self.d = d
        self.degree = d
        self.name = f"tree{d}"

    def __repr__(self) -> str:
        return f"RegularTree({self.d})"

    def __eq__(self, other) -> bool:
        return type(other) is type(self) and other.d == self.d

    def __hash__(self) -> int:
        return hash((self.kind, self.d))

    def origin(self) -> TreeVertex:
        return TreeVertex(0, "")

    def validate(self, v) -> TreeVertex:
        if isinstance(v, tuple) and len(v) == 2 and not isinstance(v, TreeVertex):
            v = TreeVertex(*v)
        if not isinstance(v, TreeVertex) or not isinstance(v.h, (int, np.integer)):
            raise ValueError(f"malformed tree vertex {v!r}")
        w = v.word
        if not isinstance(w, str) or any(not ch.isdigit() or int(ch) > self.d - 2 for ch in w):
            raise ValueError(f"malformed tree vertex {v!r}")
        if w.startswith("0"):
            raise ValueError(f"non-canonical tree vertex {v!r}")
        return TreeVertex(int(v.h), w)

    # tree structure ---------------------------------------------------
    def parent(self, v) -> TreeVertex:
        return TreeVertex(v.h + 1, v.word[:-1])

    def child(self, v, c: int) -> TreeVertex:
        if not v.word and c == 0:
            return TreeVertex(v.h - 1, "")
        return TreeVertex(v.h - 1, v.word + str(c))

    def children(self, v) -> list[TreeVertex]:
        return [self.child(v, c) for c in range(self.d - 1)]

    def child_index(self, v) -> int:
        """Which child of its parent ``v`` is."""
        return int(v.word[-1]) if v.word else 0

    def ancestor(self, v, height: int) -> TreeVertex:
        if height < v.h:
            raise ValueError("ancestor height below the vertex")
        top = v.h + len(v.word)
        if height >= top:
            return TreeVertex(height, "")
        return TreeVertex(height, v.word[: top - height])

    def lca_height(self, u, v) -> int:
        hgt = max(u.h, v.h)
        while self.ancestor(u, hgt) != self.ancestor(v, hgt):
            hgt += 1
        return hgt

    def tree_distance(self, u, v) -> int:
        u, v = self.validate(u), self.validate(v)
        top = self.lca_height(u, v)
        return (top - u.h) + (top - v.h)

    def height(self, v) -> int:
        return self.validate(v).h

    # family interface -------------------------------------------------
    def neighbors(self, v) -> list[TreeVertex]:
        v = self.validate(v)
        return [self.parent(v)] + self.children(v)

    def distance(self, u, v) -> int:
        return self.tree_distance(u, v)

    def key(self, v) -> int:
        v = self.validate(v)
        k = mix64_py(_RAY_SALT, (v.h + len(v.word)) & _MASK64)
        for ch in v.word:
            k = mix64_py(k, int(ch) + 1)
        return k

    def ray_key(self, h: int) -> int:
        return mix64_py(_RAY_SALT, h & _MASK64)

    def ball(self, center, radius: int) -> list[TreeVertex]:
        return _bfs_ball(self, center, radius)

    def to_json(self, v):
        return {"h": int(v.h), "word": v.word}

    def from_json(self, obj) -> TreeVertex:
        return self.validate(TreeVertex(int(obj["h"]), str(obj["word"])))


class Grandparent(RegularTree):
    """The grandparent graph over the d-regular tree with a fixed end.

    Neighbour order is ``parent, children, grandparent, grandchildren``;
    the degree is ``d + 1 + (d - 1)**2``.  Heights double as the Busemann
    coordinate of the distinguished end.
    """

    kind = "grandparent"

    def __init__(self, d: int = 3):
        super().__init__(d)
        self.degree = d + 1 + (d - 1) ** 2
        self.name = f"gp{d}"

    def __repr__(self) -> str:
        return f"Grandparent({self.d})"

    def grandparent(self, v) -> TreeVertex:
        return self.parent(self.parent(v))

    def grandchildren(self, v) -> list[TreeVertex]:
        return [g for c in self.children(v) for g in self.children(c)]

    def neighbors(self, v) -> list[TreeVertex]:
        v = self.validate(v)
        return [self.parent(v)] + self.children(v) + [self.grandparent(v)] + self.grandchildren(v)

    def distance(self, u, v, max_radius: int = 16) -> int:
        """Graph distance by bidirectional breadth-first search."""
        u, v = self.validate(u), self.validate(v)
        if u == v:
            return 0
        seen = [{u: 0}, {v: 0}]
        fronts = [[u], [v]]
        for step in range(1, max_radius + 1):
            side = 0 if len(fronts[0]) <= len(fronts[1]) else 1
            nxt = []
            best = None
            for x in fronts[side]:
                for y in self.neighbors(x):
                    if y in seen[side]:
                        continue
                    seen[side][y] = seen[side][x] + 1
                    nxt.append(y)
                    if y in seen[1 - side]:
                        tot = seen[side][y] + seen[1 - side][y]
                        best = tot if best is None else min(best, tot)
            if best is not None:
                return best
            fronts[side] = nxt
        raise ValueError(f"distance exceeds the search radius {max_radius}")


_FAMILY_RE = re.compile(r"^(z|tree|gp)(\d+)$")


def make_family(name: str):
    """Family from a short name: ``z3``, ``z4``, ``tree3``, ``gp3``, ..."""
    m = _FAMILY_RE.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown graph family {name!r}")
    kind, d = m.group(1), int(m.group(2))
    return {"z": Lattice, "tree": RegularTree, "gp": Grandparent}[kind](d)


def neighbors(family, v):
    return family.neighbors(v)


def distance(family, u, v) -> int:
    return family.distance(u, v)


def _bfs_ball(family, center, radius: int) -> list:
    center = family.validate(center)
    seen = {center: 0}
    order = [center]
    queue = deque([center])
    while queue:
        x = queue.popleft()
        if seen[x] == radius:
            continue
        for y in family.neighbors(x):
            if y not in seen:
                seen[y] = seen[x] + 1
                order.append(y)
                queue.append(y)
    return order


# ----------------------------------------------------------------------
# atlas


@dataclass
class Chart:
    """A partial automorphism ``reference ball -> graph`` with ``o -> x``.

    ``order`` lists the reference vertices in the well-ordering used to
    build the chart; ``image[z]`` is the image of reference vertex ``z``.
    """

    family: object
    x: object
    depth: int
    order: list
    image: dict = field(default_factory=dict)
    matrix: np.ndarray | None = None

    def __call__(self, z):
        return self.image[z]


def _reference_order(family, depth: int) -> tuple[list, dict]:
    """Breadth-first order of the reference ball and BFS parents.

    Children are visited in a fixed order: sorted offsets on the lattice,
    neighbour order on trees.
    """
    o = family.origin()
    order, parent, seen = [o], {o: None}, {o: 0}
    queue = deque([o])
    while queue:
        x = queue.popleft()
        if seen[x] == depth:
            continue
        nb = family.neighbors(x)
        if family.kind == "lattice":
            nb = sorted(nb)
        for y in nb:
            if y not in seen:
                seen[y] = seen[x] + 1
                parent[y] = x
                order.append(y)
                queue.append(y)
    return order, parent


def _signed_permutations(d: int) -> list[np.ndarray]:
    mats = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            a = np.zeros((d, d), dtype=np.int64)
            for i, (p, s) in enumerate(zip(perm, signs)):
                a[p, i] = s
            mats.append(a)
    return mats


def greedy_atlas_chart(family, field_: RandomField, x, depth: int, lane: str = "atlas") -> Chart:
    """Chart at ``x`` from the greedy orbit-minimum rule, truncated at ``depth``.

    The reference vertices ``x_0 = o, x_1, ...`` are taken in breadth-first
    order.  Given the images of ``x_0..x_n``, the image of ``x_{n+1}`` is the
    vertex of smallest field value among all positions that some automorphism
    agreeing with the choices so far can send ``x_{n+1}`` to.

    On the lattice the automorphisms fixing the chosen points are tracked
    as a set of signed permutation matrices.  On the tree the orbit of a
    new vertex is the set of unused neighbours of its BFS parent's image.
    """
    if family.kind == "grandparent":
        raise ValueError("the atlas is only built for lattices and regular trees")
    x = family.validate(x)
    order, parent = _reference_order(family, depth)
    ln = lane_id(lane)
    chart = Chart(family=family, x=x, depth=depth, order=order)
    chart.image[order[0]] = x

    def _u(vertices):
        keys = np.array([family.key(v) for v in vertices], dtype=np.uint64)
        return field_.uniform(keys, ln)

    def _pick(candidates):
        vals = _u(candidates)
        k = int(np.argmin(vals))
        if np.count_nonzero(vals == vals[k]) > 1:
            raise ValueError("tie in field values while building a chart")
        return candidates[k]

    if family.kind == "lattice":
        group = _signed_permutations(family.d)
        xv = np.array(x, dtype=np.int64)
        for z in order[1:]:
            zv = np.array(z, dtype=np.int64)
            cands = sorted({tuple(int(c) for c in xv + a @ zv) for a in group})
            y = _pick(cands) if len(cands) > 1 else cands[0]
            yv = np.array(y, dtype=np.int64) - xv
            group = [a for a in group if np.array_equal(a @ zv, yv)]
            chart.image[z] = y
        chart.matrix = group[0] if group else None
        return chart

    used = {x}
    for z in order[1:]:
        base = chart.image[parent[z]]
        cands = [y for y in family.neighbors(base) if y not in used]
        y = _pick(cands) if len(cands) > 1 else cands[0]
        used.add(y)
        chart.image[z] = y
    return chart


def verify_chart(chart: Chart) -> bool:
    """Exhaustive check that the chart is an isomorphism of depth-D balls."""
    fam = chart.family
    image = chart.image
    if len(set(image.values())) != len(image):
        return False
    target = set(fam.ball(chart.x, chart.depth))
    if set(image.values()) != target:
        return False
    dom = list(image)
    dom_set = set(dom)
    for a in dom:
        nb_ref = set(fam.neighbors(a)) & dom_set
        nb_img = set(fam.neighbors(image[a])) & target
        if {image[b] for b in nb_ref} != nb_img:
            return False
    return True
