import pytest

from interlace.graph import Grandparent, Lattice, RegularTree
from interlace.harness.rng import RandomField


@pytest.fixture
def z3():
    return Lattice(3)


@pytest.fixture
def t3():
    return RegularTree(3)


@pytest.fixture
def gp3():
    return Grandparent(3)


@pytest.fixture
def field0():
    return RandomField(0)
