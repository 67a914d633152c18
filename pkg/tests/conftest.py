import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # reference_net, gradcheck

from distill_cl import LabeledSet
from distill_cl.models import convnet_spec


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))


def random_set(n, shape=(1, 8, 8), classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledSet(
        rng.uniform(0.0, 1.0, (n,) + shape).astype(np.float32),
        rng.integers(0, classes, n),
        classes,
    )


@pytest.fixture
def tiny_spec():
    return convnet_spec(2, (1, 8, 8), 3, width=4)


@pytest.fixture
def tiny_set():
    return random_set(12, (1, 8, 8), 3, seed=7)
