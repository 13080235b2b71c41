"""Mass transport, the modular function, drift and rooting on transitive graphs.

On a Lattice and on a RegularTree every diagonally invariant transport
``f`` sends as much mass out of a vertex as it receives.  On the
grandparent graph received mass has to be tilted by the modular function
``mu(x) / mu(o) = (d - 1)**(h(x) - h(o))`` before the balance is restored.
Everything here is exact (``fractions.Fraction``) where the inputs allow.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .graph import Grandparent, Lattice, RegularTree, TreeVertex
from .harness.rng import RandomField, lane_id, sublane
from .interlacement import ri_diagnostics, sample_ri_local
from .space import make_space
from .walk import walk_paths

__all__ = [
    "TransportFunction",
    "ModularFunction",
    "modular_function",
    "relative_invariant",
    "mass_transport_sums",
    "modular_drift",
    "orbit_ratio",
    "orbit_sizes_bruteforce",
    "RootResult",
    "root_index",
    "root_map",
    "sample_roots",
    "local_time_identity",
    "LocalTimeEstimate",
    "ln_mu_increments",
]


# ----------------------------------------------------------------------
# relative positions


def _up_down(family: RegularTree, x, y) -> tuple[int, int]:
    """Steps up from ``x`` to the common ancestor, then down to ``y``."""
    top = family.lca_height(x, y)
    return top - x.h, top - y.h


def relative_invariant(family, x, y):
    """Invariant of the pair ``(x, y)`` under the graph's automorphisms.

    Lattice: the displacement ``y - x``.  RegularTree: the tree distance.
    Grandparent: ``(tree distance, h(y) - h(x))``, which fixes the way up
    and down through the common ancestor.
    """
    if isinstance(family, Lattice):
        x, y = family.validate(x), family.validate(y)
        return tuple(b - a for a, b in zip(x, y))
    x, y = family.validate(x), family.validate(y)
    a, b = _up_down(family, x, y)
    if isinstance(family, Grandparent):
        return (a + b, a - b)
    return a + b


def _invariant_reach(family, inv) -> int:
    """Graph-independent radius bound of a relative invariant."""
    if isinstance(family, Lattice):
        return sum(abs(c) for c in inv)
    if isinstance(family, Grandparent):
        return int(inv[0])
    return int(inv)


@dataclass
class TransportFunction:
    """Mass ``f(x, y)`` as a finitely supported function of the relative invariant.

    ``rule`` maps invariants (see ``relative_invariant``) to nonnegative
    masses; anything absent carries zero mass.  Because ``f`` only looks at
    the invariant, ``f(phi x, phi y) = f(x, y)`` for every automorphism.
    """

    rule: dict
    name: str = ""

    def __post_init__(self):
        clean = {}
        for k, v in self.rule.items():
            m = Fraction(v)
            if m < 0:
                raise ValueError("transport masses must be nonnegative")
            if m:
                clean[tuple(k) if isinstance(k, list) else k] = m
        self.rule = clean

    def __call__(self, family, x, y) -> Fraction:
        return self.rule.get(relative_invariant(family, x, y), Fraction(0))

    def reach(self, family) -> int:
        return max((_invariant_reach(family, k) for k in self.rule), default=0)

    def check(self, family) -> None:
        for k in self.rule:
            if isinstance(family, Lattice):
                ok = isinstance(k, tuple) and len(k) == family.d
            elif isinstance(family, Grandparent):
                ok = (isinstance(k, tuple) and len(k) == 2 and k[0] >= abs(k[1])
                      and (k[0] - k[1]) % 2 == 0)
            else:
                ok = isinstance(k, (int, np.integer)) and k >= 0
            if not ok:
                raise ValueError(f"invariant {k!r} does not fit {family!r}")

    @classmethod
    def indicator(cls, invariants, name: str = "") -> "TransportFunction":
        return cls({k: 1 for k in invariants}, name)


# ----------------------------------------------------------------------
# modular function


@dataclass(frozen=True)
class ModularFunction:
    """``mu(x) = base**h(x)`` up to a constant; ``base = 1`` means unimodular."""

    base: int

    @property
    def unimodular(self) -> bool:
        return self.base == 1

    def exponent(self, x, y) -> int:
        if self.base == 1:
            return 0
        return int(x.h) - int(y.h)

    def ratio(self, x, y) -> Fraction:
        """``mu(x) / mu(y)`` as an exact fraction."""
        e = self.exponent(x, y)
        return Fraction(self.base) ** e

    def log_ratio(self, x, y) -> float:
        return self.exponent(x, y) * math.log(self.base)

    def log_mu_of_heights(self, h) -> np.ndarray:
        return np.asarray(h, dtype=float) * math.log(self.base)


def modular_function(family) -> ModularFunction:
    if isinstance(family, Grandparent):
        return ModularFunction(family.d - 1)
    if isinstance(family, (Lattice, RegularTree)):
        return ModularFunction(1)
    raise ValueError(f"no modular function for {family!r}")


# ----------------------------------------------------------------------
# mass transport


def _tree_ball(family: RegularTree, o, radius: int) -> list:
    """Ball of the tree metric (parent and child moves only)."""
    seen = {o: 0}
    q = deque([o])
    while q:
        v = q.popleft()
        if seen[v] == radius:
            continue
        for w in [family.parent(v)] + family.children(v):
            if w not in seen:
                seen[w] = seen[v] + 1
                q.append(w)
    return list(seen)


def _ball(family, o, radius: int) -> list:
    if isinstance(family, Lattice):
        return family.ball(o, radius)
    return _tree_ball(family, o, radius)


def mass_transport_sums(family, f: TransportFunction, o=None, radius: int | None = None):
    """Exact ``(sent, received, tilted_received)`` at ``o``.

    ``sent = sum_x f(o, x)``, ``received = sum_x f(x, o)`` and
    ``tilted_received = sum_x f(x, o) mu(x) / mu(o)``, summed over the ball
    of the given radius (the lattice l1 ball or the tree-metric ball).
    Raises ``ValueError`` when the support of ``f`` reaches beyond it.
    """
    f.check(family)
    o = family.origin() if o is None else family.validate(o)
    reach = f.reach(family)
    if radius is None:
        radius = reach
    if reach > radius:
        raise ValueError(f"transport support reaches {reach} > radius {radius}")
    mu = modular_function(family)
    sent = received = tilted = Fraction(0)
    for x in _ball(family, o, radius):
        sent += f(family, o, x)
        r = f(family, x, o)
        if r:
            received += r
            tilted += r * mu.ratio(x, o)
    return sent, received, tilted


def modular_drift(family) -> float:
    """Average of ``ln(mu(x) / mu(o))`` over the neighbours ``x`` of the origin."""
    mu = modular_function(family)
    if mu.unimodular:
        return 0.0
    o = family.origin()
    nb = family.neighbors(o)
    total = sum(mu.exponent(x, o) for x in nb)
    return total * math.log(mu.base) / len(nb)


# ----------------------------------------------------------------------
# stabilizer orbits


def _orbit_count(d: int, up: int, down: int) -> int:
    """Vertices reached from a fixed vertex by ``up`` steps up then ``down`` down
    without backtracking, which is the orbit of such a vertex under the
    end-fixing stabilizer of the start."""
    if down == 0:
        return 1
    if up == 0:
        return (d - 1) ** down
    return (d - 2) * (d - 1) ** (down - 1)


def orbit_ratio(family: Grandparent, x, y, depth: int) -> Fraction:
    """``|S(x) y| / |S(y) x|`` from the (distance, height difference) orbit classes."""
    if not isinstance(family, RegularTree):
        raise ValueError("orbit ratios are computed on tree-based families")
    x, y = family.validate(x), family.validate(y)
    up, down = _up_down(family, x, y)
    if up + down > depth:
        raise ValueError(f"tree distance {up + down} exceeds depth {depth}")
    d = family.d
    return Fraction(_orbit_count(d, up, down), _orbit_count(d, down, up))


def _gp_ball_graph(family: Grandparent, center, radius: int):
    import networkx as nx

    verts = _tree_ball(family, center, radius)
    vs = set(verts)
    g = nx.Graph()
    for v in verts:
        g.add_node(v, h=v.h - center.h, mark=0)
    for v in verts:
        for w in family.neighbors(v):
            if w in vs:
                g.add_edge(v, w)
    return g


def orbit_sizes_bruteforce(family: Grandparent, x, y, radius: int | None = None) -> tuple[int, int]:
    """``(|S(x) y|, |S(y) x|)`` by searching automorphisms of finite balls.

    ``S(x) y`` is the set of ``z`` for which an automorphism of the
    grandparent-graph ball around ``x`` fixes ``x``, preserves heights and
    sends ``y`` to ``z``; existence is decided by a graph isomorphism
    search with ``x`` and the target marked.
    """
    from networkx.algorithms.isomorphism import GraphMatcher

    x, y = family.validate(x), family.validate(y)
    dist = family.tree_distance(x, y)
    radius = dist + 1 if radius is None else radius
    if radius < dist:
        raise ValueError("ball radius below the distance")

    def orbit(c, t):
        g = _gp_ball_graph(family, c, radius)
        g.nodes[c]["mark"] = 1
        g.nodes[t]["mark"] = 2
        size = 0
        for z in g.nodes:
            if z.h != t.h or z == c:
                continue
            g2 = g.copy()
            g2.nodes[t]["mark"] = 0
            g2.nodes[z]["mark"] = 2
            gm = GraphMatcher(g, g2, node_match=lambda a, b: a["h"] == b["h"] and a["mark"] == b["mark"])
            if gm.is_isomorphic():
                size += 1
        return size

    if x == y:
        return 1, 1
    return orbit(x, y), orbit(y, x)


# ----------------------------------------------------------------------
# rooting


@dataclass
class RootResult:
    """Root of a truncated double walk.

    ``index`` is the time (from ``-s_bwd`` to ``s_fwd``) of the first
    maximum of ``mu``, or ``None`` when that maximum sits in the last fifth
    of either horizon.  ``log_mu[k]`` is ``ln mu`` at time ``k - s_bwd``
    relative to the start, and ``path`` (when known) the matching vertices.
    """

    index: int | None
    s_bwd: int
    s_fwd: int
    log_mu: np.ndarray
    path: list | None = None

    @property
    def resolved(self) -> bool:
        return self.index is not None

    def rooted(self) -> list[tuple[int, object]]:
        """``(time, vertex)`` pairs with the root moved to time zero."""
        if self.index is None:
            raise ValueError("unresolved root")
        if self.path is None:
            raise ValueError("no vertices recorded")
        return [(k - self.s_bwd - self.index, v) for k, v in enumerate(self.path)]

    def satisfies_min_argmax(self) -> bool:
        """Strictly above every earlier value and at least every later one."""
        if self.index is None:
            return False
        k = self.index + self.s_bwd
        lm = self.log_mu
        return bool(np.all(lm[:k] < lm[k]) and np.all(lm[k + 1:] <= lm[k]))


def root_index(log_mu, s_bwd: int = 0, guard: float = 0.2) -> int | None:
    """First argmax time of ``log_mu`` (indexed from ``-s_bwd``) or ``None``.

    The answer is withheld when the argmax falls in the final ``guard``
    fraction of the backward or of the forward horizon.
    """
    lm = np.asarray(log_mu)
    s_fwd = lm.size - 1 - s_bwd
    if s_fwd < 0:
        raise ValueError("backward horizon longer than the path")
    t = int(np.argmax(lm)) - s_bwd
    if s_bwd > 0 and t <= -(1.0 - guard) * s_bwd:
        return None
    if s_fwd > 0 and t >= (1.0 - guard) * s_fwd:
        return None
    return t


def root_map(family, backward, forward, guard: float = 0.2) -> RootResult:
    """Root a truncated double walk given as vertex sequences from the same start.

    ``backward[k]`` is the position at time ``-k`` and ``forward[k]`` at
    time ``k`` (so both begin with the shared start).
    """
    if family.validate(backward[0]) != family.validate(forward[0]):
        raise ValueError("the two halves must share their first vertex")
    mu = modular_function(family)
    o = backward[0]
    seq = list(backward[::-1]) + list(forward[1:])
    lm = np.array([mu.log_ratio(v, o) for v in seq])
    s_bwd, s_fwd = len(backward) - 1, len(forward) - 1
    return RootResult(root_index(lm, s_bwd, guard), s_bwd, s_fwd, lm, seq)


def _root_batch(lm: np.ndarray, s_bwd: int, s_fwd: int, guard: float) -> np.ndarray:
    t = np.argmax(lm, axis=1) - s_bwd
    bad = (t <= -(1.0 - guard) * s_bwd) if s_bwd > 0 else np.zeros(t.shape, dtype=bool)
    if s_fwd > 0:
        bad |= t >= (1.0 - guard) * s_fwd
    return np.where(bad, np.iinfo(np.int64).min, t)


@dataclass
class RootSample:
    roots: np.ndarray
    s_bwd: int
    s_fwd: int
    characterization_ok: int
    meta: dict = field(default_factory=dict)

    @property
    def unresolved(self) -> np.ndarray:
        return self.roots == np.iinfo(np.int64).min

    @property
    def unresolved_fraction(self) -> float:
        return float(self.unresolved.mean()) if self.roots.size else 0.0


def sample_roots(family, n: int, s_bwd: int, s_fwd: int, field_: RandomField, batch: int = 2000,
                 guard: float = 0.2) -> RootSample:
    """Root ``n`` double walks from the origin and verify the min-argmax rule on each."""
    mu = modular_function(family)
    space = make_space(family, 1)
    o = space.id_of(family.origin(), materialise=True) if hasattr(space, "arena") else space.id_of(family.origin())
    key = space.keys(np.array([o]))[0]
    lb, lf = lane_id("root.bwd"), lane_id("root.fwd")
    roots = []
    ok = 0
    for b0 in range(0, n, batch):
        occ = np.arange(b0, min(n, b0 + batch), dtype=np.int64)
        starts = np.full(occ.size, o, dtype=np.int64)
        keys = np.full(occ.size, key, dtype=np.uint64)
        back = walk_paths(space, starts, keys, sublane(lb, occ), s_bwd + 1, field_)
        fwd = walk_paths(space, starts, keys, sublane(lf, occ), s_fwd + 1, field_)
        if hasattr(space, "arena"):
            hb, hf = space.h[back], space.h[fwd]
        else:
            hb, hf = np.zeros(back.shape), np.zeros(fwd.shape)
        h = np.concatenate([hb[:, ::-1], hf[:, 1:]], axis=1).astype(float)
        lm = mu.log_mu_of_heights(h - h[:, [s_bwd]])
        t = _root_batch(lm, s_bwd, s_fwd, guard)
        for r in np.nonzero(t != np.iinfo(np.int64).min)[0]:
            res = RootResult(int(t[r]), s_bwd, s_fwd, lm[r])
            ok += res.satisfies_min_argmax()
        roots.append(t)
        if hasattr(space, "reset"):
            space.reset()
    roots = np.concatenate(roots) if roots else np.zeros(0, dtype=np.int64)
    return RootSample(roots, s_bwd, s_fwd, ok, {"n": n})


# ----------------------------------------------------------------------
# local time at the origin


@dataclass
class LocalTimeEstimate:
    u: float
    mean: float
    se: float
    reps: int
    expected_truncated: float | None = None

    @property
    def z(self) -> float:
        return (self.mean - self.u) / self.se if self.se > 0 else (0.0 if self.mean == self.u else math.inf)

    def to_dict(self) -> dict:
        return {"u": self.u, "mean": self.mean, "se": self.se, "reps": self.reps,
                "expected_truncated": self.expected_truncated, "z": self.z}


def local_time_identity(family, u: float, reps: int, field_: RandomField, s_bwd: int | None = None,
                        s_fwd: int | None = None, level: float | None = None,
                        reset_every: int = 2000) -> LocalTimeEstimate:
    """Average number of visits to the origin by interlacement trajectories
    with label at most ``u``.

    Each replica samples the local image at level ``level`` (default ``u``)
    from an independent field and counts visits of trajectories whose
    level-scaled label ``label * level`` is at most ``u``.  The limit value
    is ``u``.  Equal horizons nearly cancel the truncation bias: the exact
    truncated mean ``u e^{s}(o) G^{s}(o, o)`` is at most ``u`` and on Z^3
    within 1e-3 of it at ``s = 250``; it is reported as
    ``expected_truncated`` for horizons up to 500.
    """
    if u < 0:
        raise ValueError("u must be nonnegative")
    level = u if level is None else level
    if level < u:
        raise ValueError("sampling level below u")
    tree = isinstance(family, RegularTree)
    if s_bwd is None:
        s_bwd = 80 if tree else 250
    if s_fwd is None:
        s_fwd = s_bwd
    o = family.origin()
    if u == 0:
        return LocalTimeEstimate(0.0, 0.0, 0.0, reps, 0.0)
    space = make_space(family, 2)
    vals = np.zeros(reps)
    for r in range(reps):
        s = sample_ri_local(family, level, [o], s_bwd, s_fwd, field_.replica(r), space=space)
        if s.visits.size:
            vals[r] = s.visits[s.labels * level <= u].sum()
        if tree and (r + 1) % reset_every == 0:
            space.reset()
    expected = None
    if max(s_bwd, s_fwd) <= 500:
        expected = ri_diagnostics(family, [o], u, s_bwd, s_fwd).get("expected_visits")
    return LocalTimeEstimate(float(u), float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(reps)),
                             reps, expected)


def ln_mu_increments(family, steps: int, field_: RandomField, start: TreeVertex | None = None) -> np.ndarray:
    """Increments of ``ln mu`` along one simple random walk of ``steps`` steps."""
    mu = modular_function(family)
    space = make_space(family, 1)
    if not hasattr(space, "arena"):
        return np.zeros(steps)
    o = space.id_of(family.origin() if start is None else start, materialise=True)
    space.reserve(steps + 8)
    key = space.keys(np.array([o]))[0]
    path = walk_paths(space, np.array([o], dtype=np.int64), np.array([key], dtype=np.uint64),
                      np.array([lane_id("mu.walk")], dtype=np.uint64), steps + 1, field_)[0]
    return np.diff(mu.log_mu_of_heights(space.h[path]))
