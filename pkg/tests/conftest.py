import numpy as np
import pytest

from segdecode.tensor import Tensor, mul, sum_all


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def projected(out, seed=0):
    """sum(out * R) for a fixed random R, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_all(mul(out, Tensor(r)))
