import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from occreid.encoder import EncoderConfig, init_weights


@pytest.fixture(scope="session")
def small_config():
    """Desk-scale encoder: 8x4 patch grid on 64x32 images, 4 layers.

    The camera scale is kept small (and float32-exact): with seed-initialized
    (untrained) weights a full-strength camera embedding would dominate the
    identity signal in the class feature, which training would otherwise
    suppress.
    """
    return EncoderConfig(
        image_h=64,
        image_w=32,
        patch_size=8,
        patch_stride=8,
        embed_dim=64,
        mlp_dim=128,
        layers=4,
        heads=4,
        sparsify_layers=(1, 2, 3),
        keep_rate=0.8,
        num_cameras=8,
        camera_scale=0.125,
    )


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_weights(small_config, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
