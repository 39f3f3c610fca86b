import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _seed_guard():
    """Tests must not depend on numpy's global RNG; make leaks loud."""
    np.random.seed(123456789)
    yield
