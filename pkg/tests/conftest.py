import numpy as np
import pytest

from mpscl.data import generate_dataset
from mpscl.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Six 16x16 training scenes per domain plus small val/test splits."""
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(root, 6, seed=0, size=(16, 16), val_scenes=2, test_scenes=2)
    return root


@pytest.fixture
def tiny_cfg(tiny_data, tmp_path):
    return TrainConfig(data_dir=str(tiny_data), out_dir=str(tmp_path / "run"), phase1_iters=3, phase2_iters=3,
                       batch_size=2, eval_every=2, feature_dim=8, lr_g=1e-3, lam=0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
