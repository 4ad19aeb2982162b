import pytest
import torch

from drnet.blocks import DropBlockConfig
from drnet.model import ModelConfig


@pytest.fixture(autouse=True)
def _single_threaded_torch():
    # Keep runtimes predictable on small CI boxes.
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig(initial_channels=2, encoder_steps=2, input_size=32)


@pytest.fixture
def small_dropblock() -> DropBlockConfig:
    return DropBlockConfig(block_size=3, keep_prob=0.9)
