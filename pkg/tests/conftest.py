import numpy as np
import pytest

from airwaytopo import testkit


@pytest.fixture(scope="session")
def tree3():
    """15-branch, depth-3 synthetic tree."""
    return testkit.generate(testkit.random_spec(3, seed=7))


@pytest.fixture(scope="session")
def tree1():
    return testkit.generate(testkit.random_spec(1, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def line_points(n, axis=0, offset=(2, 2, 2)):
    pts = np.zeros((n, 3), dtype=np.int64) + np.array(offset)
    pts[:, axis] += np.arange(n)
    return pts
