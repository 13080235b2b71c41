import itertools
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from interlace.graph import make_family
from interlace.harness.rng import RandomField
from interlace.harness.stats import chi2_gof
from interlace.softlocaltime import lattice_support, poisson_points, slt_match, tree_support
from interlace.space import Window, make_space


def _z3_points(seed=0, radius=8, a1=0.3, a2=0.3):
    fam = make_family("z3")
    sp = make_space(fam)
    W = Window(radius)
    f = RandomField(seed)
    R1 = poisson_points(sp, W, a1, f, "t.r1")
    R2 = poisson_points(sp, W, a2, f, "t.r2")
    return fam, sp, W, f, R1, R2


def test_lattice_support_matches_path_enumeration():
    # all 6^4 nearest-neighbour paths on Z^3
    steps = [s * e for e in np.eye(3, dtype=int) for s in (1, -1)]
    c = Counter()
    for path in itertools.product(range(6), repeat=4):
        c[tuple(sum(steps[i] for i in path))] += 1
    sup = lattice_support(3, 4)
    assert sup.omitted == pytest.approx(0.0, abs=1e-12)
    got = {tuple(o): p for o, p in zip(sup.offsets.tolist(), sup.p)}
    assert set(got) == set(c)
    for k, n in c.items():
        assert got[k] == pytest.approx(n / 6 ** 4, rel=1e-12)


def test_lattice_support_truncation_keeps_mass():
    sup = lattice_support(3, 40, tol=1e-3, max_full=2000)
    assert sup.metric == 2
    assert 0 < sup.omitted <= 1e-3
    assert sup.p.sum() == pytest.approx(1.0)
    assert np.all((np.abs(sup.offsets).sum(axis=1) - 40) % 2 == 0)


@pytest.mark.parametrize("d,L", [(3, 5), (4, 6)])
def test_tree_support_matches_distance_chain(d, L):
    # distance from the start is a birth-death chain reflected at 0
    q = np.zeros(L + 1)
    q[0] = 1.0
    for _ in range(L):
        nq = np.zeros(L + 1)
        nq[1] += q[0]
        for k in range(1, L):
            nq[k - 1] += q[k] / d
            nq[k + 1] += q[k] * (d - 1) / d
        nq[L - 1] += q[L] / d
        q = nq
    r, pd, omitted = tree_support(d, L)
    sphere = np.array([1] + [d * (d - 1) ** (k - 1) for k in range(1, r + 1)])
    assert r == L and omitted == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(pd * sphere, q[: r + 1], atol=1e-12)


def test_empty_r1_leaves_r2_untouched():
    fam, sp, W, f, _, R2 = _z3_points()
    m = slt_match(fam, np.zeros(0, dtype=np.int64), R2, 0.3, 4, W, f, sp)
    ids = sp.window_ids(W)
    assert m.pair_y.size == 0
    assert np.all(m.g_at(ids) == 0)
    np.testing.assert_array_equal(m.unmatched_r2_at(ids), m.r2_count_at(ids))
    assert m.r2_count_at(ids).sum() == R2.size


def test_zero_length_pairs_are_diagonal():
    fam, sp, W, f, R1, R2 = _z3_points(seed=3)
    m = slt_match(fam, R1, R2, 0.3, 0, W, f, sp)
    np.testing.assert_array_equal(m.pair_y, R1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matching_conserves_points(seed):
    fam, sp, W, f, R1, R2 = _z3_points(seed=seed)
    m = slt_match(fam, R1, R2, 0.3, 4, W, f, sp)
    ids = sp.window_ids(Window(W.radius + 4))  # matches reach L beyond the window
    real = m.pair_r2[m.pair_r2 >= 0]
    # each field point is consumed at most once and sits at the matched vertex
    assert np.unique(real).size == real.size
    np.testing.assert_array_equal(R2[real], m.pair_y[m.pair_r2 >= 0])
    assert m.matched_r2.sum() == real.size
    # consumed = matched R2 points plus phantoms, vertex by vertex
    tot = m.consumed_at(ids).sum()
    assert tot == R1.size
    assert (m.r2_count_at(ids) - m.unmatched_r2_at(ids)).sum() + m.phantom_at(ids).sum() == R1.size
    assert m.phantom.sum() == m.phantom_at(ids).sum()
    # the matched times are labels of the consumed points
    np.testing.assert_allclose(m.pair_t[m.pair_r2 >= 0], m.r2_labels[real])


def test_displacement_parity_matches_length():
    fam, sp, W, f, R1, R2 = _z3_points(seed=5)
    for L in (3, 4):
        m = slt_match(fam, R1, R2, 0.3, L, W, f, sp, tag=f"L{L}.")
        disp = np.abs(sp.coords(m.pair_y) - sp.coords(R1)).sum(axis=1)
        assert np.all(disp <= L)
        assert np.all(disp % 2 == L % 2)


def test_matching_is_deterministic():
    fam, sp, W, f, R1, R2 = _z3_points(seed=7)
    a = slt_match(fam, R1, R2, 0.3, 4, W, f, sp)
    b = slt_match(fam, R1, R2, 0.3, 4, W, f, sp)
    np.testing.assert_array_equal(a.pair_y, b.pair_y)
    np.testing.assert_array_equal(a.eta, b.eta)


def test_singleton_match_follows_kernel():
    # one R1 point at the origin: the matched vertex is p_L-distributed, eta ~ Exp(1)
    fam = make_family("z3")
    sp = make_space(fam)
    W = Window(6)
    o = sp.id_of((0, 0, 0))
    L, n = 4, 1500
    sup = lattice_support(3, L)
    ys, etas = [], []
    for r in range(n):
        f = RandomField(r)
        R2 = poisson_points(sp, W, 1.0, f, "t.r2")
        m = slt_match(fam, [o], R2, 1.0, L, W, f, sp)
        ys.append(m.pair_y[0])
        etas.append(m.eta[0])
    norms = np.abs(sp.coords(np.array(ys))).sum(axis=1)
    cls = np.abs(sup.offsets).max(axis=1) * 10 + np.abs(sup.offsets).sum(axis=1)
    obs_cls = np.abs(sp.coords(np.array(ys))).max(axis=1) * 10 + norms
    keys = np.unique(cls)
    probs = [sup.p[cls == k].sum() for k in keys]
    obs = [(obs_cls == k).sum() for k in keys]
    assert chi2_gof(obs, probs, level=1e-3).passed
    assert stats.kstest(etas, "expon").pvalue > 1e-3


def test_tree_singleton_distance_law():
    fam = make_family("tree3")
    sp = make_space(fam, 6)
    W = Window(6)
    L, n = 4, 800
    r, pd, _ = tree_support(3, L)
    sphere = np.array([1] + [3 * 2 ** (k - 1) for k in range(1, r + 1)])
    ds = []
    for k in range(n):
        f = RandomField(k)
        R2 = poisson_points(sp, W, 1.0, f, "t.r2")
        m = slt_match(fam, [0], R2, 1.0, L, W, f, sp)
        ds.append(sp.depth[m.pair_y[0]])
    obs = np.bincount(ds, minlength=r + 1)
    assert obs[1::2].sum() == 0  # parity
    assert chi2_gof(obs[::2], (pd * sphere)[::2], level=1e-3).passed


def test_g_mean_close_to_intensity():
    # away from the window edge the soft local time has mean alpha
    gs = []
    for seed in range(4):
        fam, sp, W, f, R1, R2 = _z3_points(seed=seed, radius=12, a1=0.5, a2=0.5)
        m = slt_match(fam, R1, R2, 0.5, 4, W, f, sp)
        inner = sp.window_ids(Window(6))
        gs.append(m.g_at(inner))
    g = np.concatenate(gs)
    assert g.mean() == pytest.approx(0.5, abs=0.05)


def test_grandparent_not_supported():
    fam = make_family("gp3")
    sp = make_space(fam, 4)
    with pytest.raises(NotImplementedError):
        slt_match(fam, [0], [0], 0.5, 2, Window(4), RandomField(0), sp)


def test_points_outside_window_rejected():
    fam = make_family("z3")
    sp = make_space(fam)
    far = sp.id_of((9, 0, 0))
    with pytest.raises(ValueError):
        slt_match(fam, [far], [], 0.5, 2, Window(4), RandomField(0), sp)
