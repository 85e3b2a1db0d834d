"""Shared fixtures for the MeanFlowActions test suite"""
import os

import pytest

from src.config import TrainConfig
from src.error_handler import error_reporter
from src.linalg import Rng
from src.nnet import MlpNet


@pytest.fixture(autouse=True, scope='session')
def _isolated_error_log(tmp_path_factory):
    """Keep error and audit logs out of the user's log directory"""
    error_reporter.log_file_path = str(tmp_path_factory.mktemp('logs') / 'errors.log')
    yield


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_net():
    """2-dim field with a 2-dim condition and a non-zero output layer"""
    return MlpNet.create(z_dim=2, cond_dim=2, hidden_dims=[16, 16], time_embed_dim=4,
                         rng=Rng(3), zero_final=False)


@pytest.fixture
def tiny_config():
    return TrainConfig(steps=20, batch_size=16, hidden_dims=[8], time_embed_dim=4,
                       chunk_h=1, act_dim=2, log_every=10)


@pytest.fixture
def run_dir(tmp_path):
    path = tmp_path / 'run'
    os.makedirs(path, exist_ok=True)
    return str(path)


def random_inputs(rng: Rng, n: int, z_dim: int = 2, cond_dim: int = 2):
    """Batch of (z, cond, r, t) with 0.1 <= r + 0.1 <= t <= 0.8"""
    z = rng.gauss(n, z_dim)
    cond = rng.gauss(n, cond_dim)
    t = rng.uniform(n, low=0.3, high=0.8)
    r = t - rng.uniform(n, low=0.1, high=0.2)
    return z, cond, r, t


@pytest.fixture
def inputs():
    return random_inputs
