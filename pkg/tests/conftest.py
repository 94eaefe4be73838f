"""Shared fixtures for the test suite.

The model fixtures use deliberately small widths so that forward passes and
gradient checks stay fast on a single CPU core.  The corpus fixture generates
one small dataset per session and shares it across test modules.
"""

import pytest
import torch

from sogvg.config import DataConfig, ModelConfig, RunConfig, TrainConfig
from sogvg.dataset import generate_corpus, read_manifest


@pytest.fixture(scope="session")
def tiny_model_cfg():
    """A small but structurally complete model configuration."""
    return ModelConfig(d_m=16, trunk_widths=(4, 6, 8, 10, 12), k=4)


@pytest.fixture(scope="session")
def tiny_run_cfg(tiny_model_cfg):
    return RunConfig(
        model=tiny_model_cfg,
        train=TrainConfig(batch_size=8, epochs=2, seed=0),
        data=DataConfig(seed=5, n_train=24, n_val=8, n_test=8, image_size=64),
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_run_cfg):
    """Generate a 24/8/8 corpus at 64x64 once per session.

    Returns (directory, manifest).
    """
    out_dir = tmp_path_factory.mktemp("corpus")
    generate_corpus(tiny_run_cfg.data, out_dir)
    return out_dir, read_manifest(out_dir / "manifest.json")


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
