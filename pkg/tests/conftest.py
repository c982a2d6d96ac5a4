"""Shared helpers: keyed generators and small reference problems."""

import numpy as np
import pytest

from fedbilevel.quadratic import make_quadratic_problem


def philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


@pytest.fixture
def small_quadratic():
    # 5 clients, mild conditioning; the default fixture for solver tests
    return make_quadratic_problem(
        outer_dim=6, inner_dim=40, clients=5, seed=3,
        eig_range=(0.8, 4.0), outer_reg=0.1,
    )
