import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from run_config import RunConfig  # noqa: E402


TINY_SETTINGS = {
    "image_size": 8,
    "enc_channels": 16,
    "d_split": 4,
    "depth_upsample": 1,
    "voxel_channels": 4,
    "dec_channels": 8,
    "posenet_channels": 8,
    "latent_dim": 8,
    "hidden_dim": 16,
    "batch_size": 4,
    "batch_3d": 4,
    "pretrain_batch": 2,
    "pretrain_steps": 3,
    "buffer_capacity": 64,
    "recent_window": 32,
    "total_env_steps": 12,
    "seed_steps": 4,
    "checkpoint_every": 0,
    "eval_every": 0,
    "eval_trials": 2,
    "data_root": "",
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training check (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def qapp():
    from PyQt5.QtCore import QCoreApplication
    app = QCoreApplication.instance() or QCoreApplication([])
    yield app


@pytest.fixture
def tiny_config():
    return RunConfig(TINY_SETTINGS)


@pytest.fixture
def small_config():
    """16 x 16 images; large enough for SSIM windows"""
    return RunConfig(dict(TINY_SETTINGS, image_size=16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def orbit_dataset(tmp_path):
    from dataio import generate_orbit_dataset
    root = tmp_path / "orbits"
    manifests = generate_orbit_dataset(3, 4, 8, seed=7, out_path=str(root))
    return str(root), manifests


@pytest.fixture
def tiny_cfg_file(tmp_path):
    """TINY_SETTINGS written as a key = value file"""
    path = str(tmp_path / "tiny.cfg")
    RunConfig(TINY_SETTINGS).save_to_file(path)
    return path
