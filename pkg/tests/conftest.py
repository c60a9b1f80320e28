import numpy as np
import pytest

from expmnf.numerics import substream


@pytest.fixture
def rng():
    return substream(12345, "tests")


def random_binary_batch(rng, n, p):
    """Small classification batch with weights in [0,1] and max weight 1."""
    X = rng.normal(size=(n, p))
    y = rng.integers(0, 2, size=n).astype(float)
    w = rng.uniform(size=n)
    w[int(rng.integers(n))] = 1.0
    return X, y, w
