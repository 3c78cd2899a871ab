import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the acceptance-scale tests marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """Blob experiment small enough to train, evaluate and fine-tune in seconds."""
    from config import ExperimentConfig, from_dict

    return from_dict(ExperimentConfig, {
        "kind": "blob",
        "seed": 7,
        "out_dir": str(tmp_path / "run"),
        "timesteps": 5,
        "dataset_size": 16,
        "eval_seeds": 2,
        "model": {"dim": 9, "max_frames": 4, "hidden": 8, "n_prompts": 2, "time_freqs": 2},
        "train": {"batch_size": 4, "steps": 10},
        "rollout": {"f_prev": 1, "f_new": 2, "total_frames": 6},
        "reward": {"steps": 10, "hidden": 4, "batch_size": 4, "n_train": 40, "n_test": 10},
        "dpo": {"stage_count": 1, "refresh_interval": 3, "samples_per_prompt": 2,
                "n_prompts": 2, "batch_size": 2, "eval_every": 1},
    })
