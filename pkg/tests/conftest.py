import numpy as np
import pytest

from sparse_frontend import autodiff


@pytest.fixture(autouse=True)
def clean_engine_state():
    """Isolate surrogate registrations and float mode between tests."""
    autodiff.clear_surrogates()
    autodiff.set_default_dtype(np.float32)
    yield
    autodiff.clear_surrogates()
    autodiff.set_default_dtype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
