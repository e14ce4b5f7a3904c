import pytest

from contirq import World


@pytest.fixture
def world2():
    w = World(2)
    yield w
    w.shutdown()


@pytest.fixture
def world1():
    w = World(1)
    yield w
    w.shutdown()
