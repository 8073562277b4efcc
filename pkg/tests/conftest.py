import numpy as np
import pytest

from sgnet import autodiff as ad


@pytest.fixture(autouse=True)
def _checked_mode():
    """NaN/Inf screening is off by default but on across the test suite."""
    with ad.checked(True):
        yield


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)
