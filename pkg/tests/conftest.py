""" Shared pytest fixtures for all tests """

import copy
import json

import pytest
import torch

from labelfactory.configuration import FactoryConfig
from labelfactory.embedding import ToyEmbedder
from labelfactory.labels.targets import BoxLabel
from labelfactory.networks.discriminator import DualDiscriminator
from labelfactory.networks.generator import StyleGenerator

# Three synthesis layers at 4, 8 and 16 px
TINY_CONFIG = {
    "seed": 0,
    "n_synth": 6,
    "psi": 0.7,
    "generator": {
        "num_layers": 3,
        "z_dim": 16,
        "w_dim": 16,
        "channels": [16, 8, 8],
        "mapping_layers": 2,
        "pretrain_iters": 3,
        "pretrain_batch": 4,
    },
    "embedder": {"kind": "toy", "dim": 16},
    "adapt": {
        "total_iters": 4,
        "batch_size": 2,
        "phase_switch_iter": 2,
        "log_every": 1,
    },
    "label": {
        "stride": 2,
        "hidden_channels": 8,
        "iters": 3,
        "optimizer": "adam",
        "lr": 0.001,
        "n_annotated": 3,
        "score_thresh": 0.3,
        "max_dets": 8,
    },
    "detector": {
        "width": 4,
        "pretrain_iters": 3,
        "finetune_iters": 2,
        "batch_size": 4,
        "n_source": 8,
    },
    "data": {"n_fewshot": 2, "n_target_test": 4},
    "eval": {
        "n_diversity": 4,
        "seeds": [0, 1],
        "sweep_samples": [3, 6],
        "sweep_shots": [1, 2],
    },
}


@pytest.fixture
def tiny_config_dict():
    """Return a fresh copy of the tiny configuration mapping"""
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config(tiny_config_dict):
    """Return a validated FactoryConfig small enough to train in well under a second"""
    return FactoryConfig.from_dict(tiny_config_dict)


@pytest.fixture
def test_config(tmp_path, tiny_config_dict):
    """Write the tiny configuration to a JSON file and return its path"""
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(tiny_config_dict))
    return config_path


@pytest.fixture
def tiny_generator(tiny_config):
    """Return a randomly initialised 3-layer generator"""
    return StyleGenerator.from_config(tiny_config.generator, seed=0)


@pytest.fixture
def tiny_discriminator(tiny_config):
    """Return a randomly initialised discriminator matching the tiny generator"""
    return DualDiscriminator.from_config(tiny_config.discriminator, tiny_config.generator, seed=1)


@pytest.fixture
def toy_embedder():
    """Return a small deterministic embedder"""
    return ToyEmbedder(dim=16, seed=0)


@pytest.fixture
def sample_boxes():
    """Return boxes inside a 16x16 image, with centers in distinct stride-2 cells"""
    return [
        BoxLabel(0, 1.0, 1.0, 7.0, 7.0),
        BoxLabel(1, 9.0, 2.0, 15.0, 6.0),
        BoxLabel(2, 4.0, 10.0, 12.0, 16.0),
    ]


@pytest.fixture
def fewshot_images():
    """Return two deterministic 16x16 images in [-1, 1]"""
    rng = torch.Generator().manual_seed(3)
    return torch.rand(2, 3, 16, 16, generator=rng) * 2 - 1
