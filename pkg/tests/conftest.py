import numpy as np
import pytest

from kawasaki_twoscale.core import cosine_potential, gaussian_potential
from kawasaki_twoscale.operators import get_cache


@pytest.fixture(scope="session")
def gauss():
    return gaussian_potential()


@pytest.fixture(scope="session")
def cos_pot():
    """Library cosine potential 0.5 cos(x + 1); not symmetric, so its tilt is nonzero."""
    return cosine_potential(0.5, 1.0, 1.0)


@pytest.fixture(scope="session")
def cache64():
    return get_cache(64, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def mean_zero(rng, *shape):
    x = rng.standard_normal(shape)
    return x - x.mean(axis=-1, keepdims=True)
