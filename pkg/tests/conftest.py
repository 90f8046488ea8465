import pytest
import torch

from camodiff.pipeline import Pipeline, PipelineConfig
from camodiff.synth import SynthConfig, generate


TINY_CFG = dict(image_size=32, base_channels=16, channel_mults=(1, 2),
                firm_hidden=16, seed=3)


@pytest.fixture
def tiny_pipeline() -> Pipeline:
    return Pipeline(PipelineConfig(**TINY_CFG))


@pytest.fixture(scope="session")
def samples32():
    return list(generate(SynthConfig(size=32, seed=11), 8))


@pytest.fixture
def mock_server():
    from camodiff.crdm.mock_server import MockVlmServer
    server = MockVlmServer().start()
    yield server
    server.stop()


def box_mask(size: int, y0: int, y1: int, x0: int, x1: int) -> torch.Tensor:
    mask = torch.zeros(1, 1, size, size)
    mask[:, :, y0:y1, x0:x1] = 1.0
    return mask


def rng_tensor(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)
