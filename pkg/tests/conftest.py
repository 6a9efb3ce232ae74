"""Shared fixtures: a small rendered world for fast tests and a
session-scoped full-size world for the end-to-end suite."""

import numpy as np
import pytest
import torch

from placerec import data
from placerec.backbone import PairBackbone, tiny_config
from placerec.pipeline import cached_loader
from placerec.synthworld import SynthWorldConfig, generate_synth_world

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def micro_world(tmp_path_factory):
    """Six places, full pano geometry — enough for every sampling mode."""
    out = tmp_path_factory.mktemp("micro_world")
    cfg = SynthWorldConfig(num_places=6, panos_per_place=4, ego_per_place=4,
                           texture_seed=11)
    manifest = generate_synth_world(cfg, str(out))
    return manifest


@pytest.fixture(scope="session")
def full_world(tmp_path_factory):
    """The acceptance-scale world: 50 places x 4 panos + 4 egocentric."""
    out = tmp_path_factory.mktemp("full_world")
    cfg = SynthWorldConfig(num_places=50, panos_per_place=4, ego_per_place=4,
                           texture_seed=0)
    manifest = generate_synth_world(cfg, str(out))
    return manifest


@pytest.fixture(scope="session")
def shared_loader():
    return cached_loader(maxsize=512)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(0)
    return PairBackbone(tiny_config(64))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture()
def micro_places(micro_world):
    return data.load_manifest(micro_world)
