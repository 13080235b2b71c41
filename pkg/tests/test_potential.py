import itertools
import math

import numpy as np
import pytest

from interlace.graph import make_family
from interlace.potential import capacity, eq_measure_trunc, escape_table, singleton_escape


def brute_escape(fam, K, x, s):
    """P(no visit to K at times 1..s) by enumerating all walks of s steps."""
    K = set(K)
    ok = 0
    for moves in itertools.product(range(fam.degree), repeat=s):
        v = x
        for m in moves:
            v = fam.neighbors(v)[m]
            if v in K:
                break
        else:
            ok += 1
    return ok / fam.degree ** s


@pytest.mark.parametrize("name", ["z3", "tree3", "gp3"])
def test_singleton_escape_matches_enumeration(name):
    fam = make_family(name)
    o = fam.origin()
    e = singleton_escape(fam, 5)
    for s in range(1, 6):
        assert e[s] == pytest.approx(brute_escape(fam, [o], o, s), abs=1e-12)


def test_pair_escape_matches_enumeration(z3):
    K = [(0, 0, 0), (1, 0, 0)]
    E = escape_table(z3, K, 4)
    for i, x in enumerate(sorted(K)):
        assert E[i, 4] == pytest.approx(brute_escape(z3, K, x, 4), abs=1e-12)
    assert eq_measure_trunc(z3, K, (1, 0, 0), 4) == pytest.approx(E[1, 4])


def test_tree_capacity_of_a_point(t3):
    res = capacity(t3, [t3.origin()])
    assert abs(res.value - 0.5) < 5e-3
    assert res.gap < 1e-6


def test_tree_capacity_of_an_edge(t3):
    # each endpoint escapes iff its first step leaves the edge and it never returns: (2/3) * (1/2) * 2
    o = t3.origin()
    res = capacity(t3, [o, t3.parent(o)])
    assert res.value == pytest.approx(2 / 3, abs=1e-5)


def test_z3_escape_converges_to_polya():
    e = singleton_escape(make_family("z3"), 400)
    assert np.all(np.diff(e[1:]) <= 1e-15)
    # 1 / G(o, o) for the simple walk on Z^3; truncation error decays like s^{-1/2}
    assert 0.6594 < e[400] < 0.6594 + 0.02


def test_capacity_rejects_empty(t3):
    with pytest.raises(ValueError):
        capacity(t3, [])
