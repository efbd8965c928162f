import numpy as np
import pytest
import torch

from anofade.model import DenoiserModel, ModelConfig

# keep every test single-threaded and reproducible
torch.set_num_threads(1)


MINIATURE_CONFIG = ModelConfig(
    base_width=4, channel_mults=(1, 2), blocks_per_level=1, time_dim=8,
    pe_channels=4, norm_groups=4,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def miniature_model():
    torch.manual_seed(0)
    model = DenoiserModel(MINIATURE_CONFIG)
    assert model.parameter_count() <= 10_000
    return model


def random_layers(rng, size=8, channels=3, mask_fraction=0.3, dtype=np.float64):
    """Random (normal, anomaly, mask) triple for algebra tests."""
    normal = rng.uniform(-1.0, 1.0, size=(size, size, channels)).astype(dtype)
    anomaly = rng.uniform(-1.0, 1.0, size=(size, size, channels)).astype(dtype)
    mask = (rng.random((size, size)) < mask_fraction).astype(dtype)
    if not mask.any():
        mask[size // 2, size // 2] = 1.0
    return normal, anomaly, mask
