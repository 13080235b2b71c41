import numpy as np
import pytest
from scipy import stats

from interlace.graph import make_family
from interlace.harness.rng import RandomField
from interlace.harness.stats import poisson_gof
from interlace.interlacement import (first_entry_edges, ri_diagnostics, sample_fli, sample_fli_labeled,
                                     sample_ri_local, wusf_from_ri)
from interlace.space import Window, make_space


def test_fli_zero_intensity(z3):
    X = sample_fli(z3, 0.0, 4, Window(3), RandomField(0))
    assert len(X) == 0


@pytest.mark.parametrize("name", ["z3", "tree3"])
def test_fli_start_counts_poisson(name):
    fam = make_family(name)
    X = sample_fli(fam, 0.5, 8, Window(12 if name == "z3" else 9), RandomField(3))
    rep = poisson_gof(X.meta["counts"], 0.5)
    assert X.meta["counts"].size >= 1000
    assert rep.passed


def test_fli_members_are_walks(t3):
    sp = make_space(t3, 3)
    X = sample_fli(t3, 1.0, 6, Window(2), RandomField(1), sp)
    for path in X.trajectories()[:20]:
        for a, b in zip(path[:-1], path[1:]):
            assert b in t3.neighbors(a)


def test_fli_exactness_guard(z3):
    with pytest.raises(ValueError):
        sample_fli(z3, 0.5, 10, Window(3), RandomField(0), K=[(0, 0, 0)])


def test_labeled_fli_labels_uniform(z3):
    X = sample_fli_labeled(z3, 2, Window(12), RandomField(8))
    assert stats.kstest(X.labels, "uniform").pvalue > 1e-3
    assert X.meta["v"] == 0.5


def test_ri_kept_matches_truncated_capacity(t3):
    u, s = 1.0, 40
    reps = 2000
    kept = np.array([sample_ri_local(t3, u, [t3.origin()], s, s, RandomField(5).replica(r)).total_kept
                     for r in range(reps)])
    rate = ri_diagnostics(t3, [t3.origin()], u, s, s)["expected_kept"]
    assert rate == pytest.approx(0.5, abs=5e-3)
    assert poisson_gof(kept, rate).passed


def test_ri_images_start_and_end_in_K(z3):
    K = [(0, 0, 0), (1, 0, 0)]
    s = sample_ri_local(z3, 3.0, K, 30, 30, RandomField(2))
    keys = {z3.key(k) for k in K}
    for path, lab in s.image.members:
        assert path[0] in keys and path[-1] in keys
        assert 0 <= lab <= 1


def test_first_entry_edges():
    path = ["a", "b", "a", "c", "b", "d"]
    assert first_entry_edges(path) == {"b": "a", "c": "a", "d": "b"}


def test_wusf_is_a_forest(z3):
    for seed in range(5):
        f = wusf_from_ri(z3, 1.0, Window(3, 2), RandomField(seed), 60, 60)
        assert not f.has_cycle()
        assert all(v == 1 for v in f.out_degrees().values())
        assert set(f.parent) | set(f.uncovered) == set(int(y) for y in f.inner)


def test_wusf_edges_are_graph_edges(t3):
    f = wusf_from_ri(t3, 2.0, Window(3, 2), RandomField(1), 40, 40)
    sp = f.space
    for y, x in f.edges():
        assert sp.vertex(x) in t3.neighbors(sp.vertex(y))
