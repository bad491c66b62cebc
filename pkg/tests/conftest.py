import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def rng(seed=0):
    return np.random.default_rng(seed)


def rand64(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))
