"""Shared fixtures: vocabulary, tiny model configs, --runslow switch."""

import json

import pytest
import torch

from morphxai.model import ModelConfig, MorphologicalDetector
from morphxai.schema import build_vocabulary


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def vocab():
    return build_vocabulary()


@pytest.fixture
def tiny_config():
    return ModelConfig(
        hidden_dim=16,
        num_queries=6,
        num_decoder_layers=2,
        num_heads=2,
        ffn_dim=32,
        backbone_channels=(4, 8, 8, 8),
        image_size=32,
    )


@pytest.fixture
def tiny_model(tiny_config, vocab):
    torch.manual_seed(0)
    return MorphologicalDetector(tiny_config, vocab)


TINY_RUN = {
    "data.n_train": 4,
    "data.n_val": 2,
    "scene.image_size": [64, 64],
    "scene.parasites_per_image": [1, 2],
    "model.image_size": 64,
    "model.hidden_dim": 16,
    "model.num_queries": 6,
    "model.num_decoder_layers": 2,
    "model.num_heads": 2,
    "model.ffn_dim": 32,
    "model.backbone_channels": [4, 8, 8, 8],
    "train.batch_size": 2,
    "train.epochs": 2,
    "train.eval_every": 1,
    "train.progress": False,
}


@pytest.fixture
def tiny_run(tmp_path, monkeypatch):
    """Flat overrides for a seconds-long end-to-end run rooted in tmp_path."""
    monkeypatch.chdir(tmp_path)
    for name in ("MORPHXAI_OUTPUT_ROOT", "MORPHXAI_SEED", "MORPHXAI_DEVICE", "MORPHXAI_LAMBDA", "MORPHXAI_PROGRESS"):
        monkeypatch.delenv(name, raising=False)
    return {**TINY_RUN, "paths.output_root": str(tmp_path)}


@pytest.fixture
def tiny_config_file(tmp_path, tiny_run):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_run, indent=2))
    return path
