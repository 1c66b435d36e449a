import numpy as np
import pytest

from advprop_lab.layers import build_desknet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net():
    """DeskNet on 8x8 single-channel inputs, two BN routes."""
    return build_desknet(1, 3, 2, image_size=8, seed=7)


def random_batch(rng, n=6, c=1, size=8, classes=3):
    return rng.random((n, c, size, size)), rng.integers(0, classes, n)


def snapshot(model):
    return {k: v.copy() for k, v in model.state().items()}


def assert_state_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
