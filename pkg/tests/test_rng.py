import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from interlace.graph import Lattice
from interlace.harness.rng import RandomField, lane_id, philox4x32, poisson_from_uniform, sublane

U = np.uint64


@pytest.mark.parametrize(
    "ctr,key,expected",
    [
        ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
        ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
        ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
         (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
    ],
)
def test_philox_known_answers(ctr, key, expected):
    out = philox4x32(*(U(c) for c in ctr), *(U(k) for k in key))
    assert tuple(int(x) for x in out) == expected


def test_field_is_pure():
    f = RandomField(42)
    keys = np.arange(1000, dtype=np.uint64) * U(7919)
    a = f.uniform(keys, lane_id("x"), 3)
    b = RandomField(42).uniform(keys, lane_id("x"), 3)
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_lanes_and_indices_differ():
    f = RandomField(1)
    k = np.arange(500, dtype=np.uint64)
    a = f.uniform(k, lane_id("a"))
    b = f.uniform(k, lane_id("b"))
    c = f.uniform(k, lane_id("a"), 1)
    assert not np.any(a == b)
    assert not np.any(a == c)


def test_uniformity_ks():
    u = RandomField(7).uniform(np.arange(20000, dtype=np.uint64), lane_id("ks"))
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_replicas_are_distinct():
    f = RandomField(3)
    k = np.arange(100, dtype=np.uint64)
    assert not np.array_equal(f.replica(0).uniform(k, 1), f.replica(1).uniform(k, 1))


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(-50, 50)] * 3), st.tuples(*[st.integers(-50, 50)] * 3))
def test_shifted_field_translates(x, g):
    fam = Lattice(3)
    f = RandomField(11)
    f2 = f.shifted(fam.translation_code(g))
    kx = np.uint64(fam.key(x))
    kxg = np.uint64(fam.key(fam.translate(x, g)))
    assert f2.uniform(kxg, 5, 2) == f.uniform(kx, 5, 2)


def test_sublane_zero_keeps_lane():
    ln = lane_id("walk")
    assert sublane(ln, 0) == ln
    assert len(set(int(x) for x in sublane(ln, np.arange(100)))) == 100


@pytest.mark.parametrize("rate", [0.1, 0.5, 3.0])
def test_poisson_inverse_cdf(rate):
    u = RandomField(5).uniform(np.arange(20000, dtype=np.uint64), 9)
    k = np.array([poisson_from_uniform(x, rate) for x in u])
    assert abs(k.mean() - rate) < 4 * np.sqrt(rate / k.size)


def test_poisson_zero_rate():
    assert poisson_from_uniform(0.999, 0.0) == 0
