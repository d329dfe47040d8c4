import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_spd(rng, n, cond_floor=0.5):
    B = rng.standard_normal((n, n))
    return B @ B.T + cond_floor * np.eye(n)
