import numpy as np
import pytest

from dpfed import ParamVector


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_paramvector(rng, num_layers=11, min_dim=1, max_dim=40, scale=1.0):
    return ParamVector(
        (
            f"layer{j}",
            scale * rng.standard_normal(int(rng.integers(min_dim, max_dim + 1))),
        )
        for j in range(num_layers)
    )
