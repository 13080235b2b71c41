import itertools
from fractions import Fraction

import numpy as np
import pytest

from interlace.graph import make_family
from interlace.harness.rng import RandomField, lane_id
from interlace.space import Window, make_space
from interlace.walk import (LatticeKernelTable, Stream, heat_kernel_profile, kernel_field, sample_bridge,
                            sample_srw, tree_distance_profile, walk_paths)


def brute_return_probs(fam, n_max):
    """Exact p_n(o, o) by enumerating every walk (independent of the DP tables)."""
    o = fam.origin()
    layer = {o: Fraction(1)}
    out = [Fraction(1)]
    for _ in range(n_max):
        nxt = {}
        for v, p in layer.items():
            w = p / fam.degree
            for u in fam.neighbors(v):
                nxt[u] = nxt.get(u, Fraction(0)) + w
        layer = nxt
        out.append(layer.get(o, Fraction(0)))
    return out


@pytest.mark.parametrize("name", ["z3", "tree3", "gp3"])
def test_heat_kernel_matches_enumeration(name):
    fam = make_family(name)
    n = 6
    exact = brute_return_probs(fam, n)
    prof = heat_kernel_profile(fam, n)
    assert np.allclose(prof.p, [float(x) for x in exact], rtol=1e-12, atol=1e-15)


def test_z3_small_returns():
    p = heat_kernel_profile(make_family("z3"), 4).p
    assert p[1] == 0 and p[3] == 0
    assert p[2] == pytest.approx(1 / 6)
    assert p[4] == pytest.approx(90 / 6 ** 4)


def test_tree_profile_rows_sum_to_one():
    q = tree_distance_profile(3, 30)
    assert np.allclose(q.sum(axis=1), 1.0)
    assert q[4, 0] == pytest.approx(15 / 81)


def test_kernel_field_lattice_offsets(z3):
    kf = kernel_field(z3, (1, 0, 0), 3)
    assert kf.p(1, (0, 0, 0)) == pytest.approx(1 / 6)
    assert kf.p(1, (1, 0, 0)) == 0
    assert sum(kf.slice(3).values()) == pytest.approx(1.0)


def test_lattice_kernel_table_lookup():
    tab = LatticeKernelTable(3, 6)
    kf = kernel_field(make_family("z3"), (0, 0, 0), 6)
    for z in [(0, 0, 0), (1, 1, 0), (-2, 0, 0), (3, -1, 2), (0, 0, 6)]:
        assert tab.p(6, z) == pytest.approx(kf.p(6, z), abs=1e-15)


@pytest.mark.parametrize("name", ["z3", "tree3", "gp3"])
def test_srw_steps_are_edges(name):
    fam = make_family(name)
    path = sample_srw(fam, fam.origin(), 40, Stream(RandomField(1), fam.key(fam.origin()), 3))
    assert len(path) == 41
    for a, b in zip(path[:-1], path[1:]):
        assert b in fam.neighbors(a)


def test_bridge_hits_target_and_is_uniform_in_the_middle(z3):
    o = z3.origin()
    mids = []
    for r in range(600):
        p = sample_bridge(z3, o, o, 2, Stream(RandomField(r), 0, 1))
        assert p[0] == o and p[-1] == o
        mids.append(p[1])
    counts = np.array([mids.count(v) for v in z3.neighbors(o)])
    assert counts.sum() == 600
    assert counts.min() > 60


def test_bridge_parity_error(z3):
    with pytest.raises(ValueError):
        sample_bridge(z3, (0, 0, 0), (1, 0, 0), 2, Stream(RandomField(0), 0, 0))


@pytest.mark.parametrize("name", ["z3", "tree3", "gp3"])
def test_walk_paths_are_walks(name):
    fam = make_family(name)
    sp = make_space(fam, 2)
    ids = sp.window_ids(Window(1))
    paths = walk_paths(sp, ids, sp.keys(ids), lane_id("t"), 30, RandomField(2))
    assert paths.shape == (ids.size, 30)
    verts = [[sp.vertex(i) for i in row] for row in paths[:3]]
    for row in verts:
        for a, b in zip(row[:-1], row[1:]):
            assert b in fam.neighbors(a)


def test_walk_paths_deterministic(z3):
    sp = make_space(z3)
    ids = sp.box(2)
    f = RandomField(5)
    a = walk_paths(sp, ids, sp.keys(ids), 7, 20, f)
    b = walk_paths(sp, ids[::-1], sp.keys(ids[::-1]), 7, 20, f)[::-1]
    assert np.array_equal(a, b)


def test_lattice_walk_step_law(z3):
    sp = make_space(z3)
    n = 60000
    starts = np.zeros(n, dtype=np.int64) + sp.id_of((0, 0, 0))
    paths = walk_paths(sp, starts, np.arange(n, dtype=np.uint64), 1, 2, RandomField(3))
    steps = sp.coords(paths[:, 1])
    counts = np.array([np.sum(np.all(steps == np.array(v), axis=1)) for v in z3.neighbors((0, 0, 0))])
    chi2 = ((counts - n / 6) ** 2 / (n / 6)).sum()
    assert chi2 < 20.5  # 99.9% point of chi-square with 5 dof
