import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from interlace.graph import make_family
from interlace.harness.rng import RandomField
from interlace.interlacement import sample_fli
from interlace.pointproc import (LocalImage, TrajectoryMeasure, local_distance, localize, member_ranks,
                                 occurrence_index, shear, w1_empirical)
from interlace.space import Window, make_space


def test_localize_single_path():
    img = localize(("a", "b", "c"), {"b"})
    assert img.members == [(("b",), None)]


def test_localize_misses():
    assert len(localize(("a", "c"), {"b"})) == 0


def test_localize_keeps_excursions():
    img = localize(("a", "b", "x", "y", "b", "c"), {"b"})
    assert img.members == [(("b", "x", "y", "b"), None)]


def test_localize_compatible_on_samples(z3):
    sp = make_space(z3)
    X = sample_fli(z3, 0.3, 6, Window(6), RandomField(2), sp, label_lane="lab")
    K = [(0, 0, 0), (1, 0, 0)]
    K2 = K + [(0, 1, 0), (0, 0, 1), (-1, 0, 0)]
    assert localize(X, K) == localize(localize(X, K2), K)


def test_shear_modes():
    w = [("a", "b", "c", "d")]
    assert shear(w, "terminal", 2) == [("c", "d")]
    assert shear(w, "initial", 4) == w
    assert shear(w, "step", 1) == ["b"]
    with pytest.raises(ValueError):
        shear(w, "initial", 5)


def test_shear_measure(z3):
    X = sample_fli(z3, 0.5, 8, Window(3), RandomField(1), make_space(z3))
    a = shear(X, "initial", 4)
    b = shear(X, "terminal", 4)
    assert np.array_equal(a.paths, X.paths[:, :4])
    assert np.array_equal(b.paths, X.paths[:, 4:])
    assert np.array_equal(shear(X, "step", 3), X.paths[:, 3])


def lp_w1(a, b):
    """Transport LP between two uniform empirical measures (independent oracle)."""
    n = len(a)
    cost = np.abs(np.subtract.outer(a, b)).ravel() / n
    A = []
    for i in range(n):
        row = np.zeros((n, n))
        row[i, :] = 1
        A.append(row.ravel())
    for j in range(n):
        col = np.zeros((n, n))
        col[:, j] = 1
        A.append(col.ravel())
    res = linprog(cost, A_eq=np.array(A), b_eq=np.ones(2 * n), bounds=(0, None))
    return res.fun


@pytest.mark.parametrize("a,b,expected", [([0.3, 0.6], [0.3, 0.6], 0.0), ([0.2], [0.5], 0.3),
                                          ([0.1, 0.9], [0.2, 0.8], 0.1)])
def test_w1_examples(a, b, expected):
    assert w1_empirical(a, b) == pytest.approx(expected)
    assert w1_empirical(a, b) == pytest.approx(lp_w1(np.array(a), np.array(b)), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(st.lists(st.floats(0, 1), min_size=n, max_size=n),
                                                    st.lists(st.floats(0, 1), min_size=n, max_size=n))))
def test_w1_matches_lp(ab):
    a, b = map(np.array, ab)
    assert w1_empirical(a, b) == pytest.approx(lp_w1(a, b), abs=1e-7)


def test_w1_needs_equal_sizes():
    with pytest.raises(ValueError):
        w1_empirical([0.1], [0.1, 0.2])


def test_local_distance_examples():
    K = {"o"}
    a = LocalImage([(("o",), 0.25)])
    b = LocalImage([(("o",), 0.75)])
    c = LocalImage([(("o", "x", "o"), 0.25)])
    assert local_distance(a, a, K) == 0
    assert local_distance(a, b, K) == pytest.approx(0.5)
    assert local_distance(a, c, K) == 1.0


def test_member_ranks_ignore_member_order(z3):
    sp = make_space(z3)
    X = sample_fli(z3, 0.8, 5, Window(2), RandomField(6), sp, label_lane="l")
    perm = np.random.default_rng(0).permutation(len(X))
    Y = TrajectoryMeasure(sp, X.paths[perm], X.labels[perm])
    oa, _ = member_ranks(X)
    ob, _ = member_ranks(Y)
    assert np.array_equal(X.paths[oa], Y.paths[ob])


def test_member_ranks_translation_invariant(z3):
    sp = make_space(z3)
    X = sample_fli(z3, 0.8, 5, Window(2), RandomField(6), sp)
    Y = TrajectoryMeasure(sp, sp.translate_ids(X.paths, (4, -2, 9)))
    assert np.array_equal(member_ranks(X)[1], member_ranks(Y)[1])


def test_occurrence_index():
    assert occurrence_index(np.array([5, 3, 5, 5, 3])).tolist() == [0, 0, 1, 2, 1]


def test_measure_json_roundtrip_shape(t3):
    sp = make_space(t3, 2)
    X = sample_fli(t3, 0.5, 3, Window(1), RandomField(0), sp)
    import json

    data = json.loads(X.to_json())
    assert len(data) == len(X)
    assert all(len(m["path"]) == 3 for m in data)
