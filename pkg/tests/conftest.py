import zlib
from pathlib import Path

import numpy as np
import pytest

from loramix import ModelConfig, init_model, synthetic_prompt

REPO = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def model(cfg):
    return init_model(cfg)


@pytest.fixture(scope="session")
def prompt(cfg):
    return synthetic_prompt(cfg, 1)


@pytest.fixture
def rng(request):
    # stable per-test seed derived from the test name
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))
