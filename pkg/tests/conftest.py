"""Shared fixtures: a fast small-dimension config, a tiny dataset, and a
prebuilt small model. Training-mutating tests take deep copies."""

from __future__ import annotations

import copy

import pytest
import torch

from charadapter import dataset as ds
from charadapter.config import (
    AdapterConfig,
    BackboneConfig,
    EncoderConfig,
    PretrainConfig,
    RunConfig,
    StageConfig,
)
from charadapter.model import build_model
from charadapter.rng import seeded_rng

torch.set_num_threads(1)


def make_small_config(seed: int = 11) -> RunConfig:
    config = RunConfig(
        seed=seed,
        encoder_resolution=32,
        toy_low_resolution=32,
        toy_high_resolution=64,
        sample_steps=4,
        semantic_encoder=EncoderConfig(patch_size=8, depth=2, width=16, heads=2),
        structural_encoder=EncoderConfig(patch_size=8, depth=2, width=16, heads=2),
        adapter=AdapterConfig(
            width=32,
            heads=2,
            intermediate_depth=1,
            num_queries=4,
            qformer_depth=1,
            context_dim=16,
        ),
        backbone=BackboneConfig(patch_size=4, width=32, depth=2, heads=2, time_dim=32),
        pretrain=PretrainConfig(steps=2, batch_size=2),
        stages=[
            StageConfig(1, 32, 0.0, 1.0, steps=3, batch_size=2),
            StageConfig(2, 32, 1.0, 0.0, steps=3, batch_size=2),
            StageConfig(3, 64, 0.5, 0.5, steps=2, batch_size=2),
        ],
    )
    config.validate()
    return config


@pytest.fixture(scope="session")
def small_config() -> RunConfig:
    return make_small_config()


@pytest.fixture(scope="session")
def small_model_pristine(small_config):
    return build_model(small_config)


@pytest.fixture
def small_model(small_model_pristine):
    return copy.deepcopy(small_model_pristine)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 characters x 3 views, half unpaired, rendered to disk."""
    root = tmp_path_factory.mktemp("smalldata")
    manifest = ds.generate_dataset(8, 3, 0.5, seeded_rng(11, "dataset-gen"))
    ds.write_dataset(manifest, root)
    return root, manifest


@pytest.fixture(scope="session")
def sample_image():
    spec = ds.CharacterSpec(ds.identity_from_index(42), ds.view_from_index(17))
    return ds.render(spec, 64)
