import numpy as np
import pytest

from guidedmae.data import generate_dataset
from guidedmae.model import ModelConfig


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Small generated corpus shared by data/eval/cli tests."""
    root = tmp_path_factory.mktemp("mini_data")
    index = generate_dataset(
        root, classes=3, per_class=10, image_size=32, patch_size=4, seed=11
    )
    return index


@pytest.fixture
def tiny_config():
    """Model small enough for fast training in unit tests."""
    return ModelConfig(
        image_size=32,
        patch_size=8,
        embed_dim=32,
        decoder_dim=16,
        heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        mlp_ratio=2.0,
        seed=0,
    )


@pytest.fixture
def micro_config():
    """Gradient-check geometry: d=16, one block, four patches, float64."""
    return ModelConfig(
        image_size=16,
        patch_size=8,
        embed_dim=16,
        decoder_dim=16,
        heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        mlp_ratio=2.0,
        seed=3,
        dtype="float64",
    )


def random_images(n, size, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3))
