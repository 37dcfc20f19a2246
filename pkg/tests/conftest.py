import numpy as np
import pytest

from hralert.synthetic import random_statements


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_statements():
    return random_statements(np.random.default_rng(5), 12, 3, 40, n_keys=3, n_values=5)

