import numpy as np
import pytest

from tinymotion import _kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # JIT-compile (or load from disk cache) before anything is timed.
    _kernels.warm_up()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
