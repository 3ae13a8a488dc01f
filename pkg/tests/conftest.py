import numpy as np
import pytest

from gctf import tensor as T
from gctf.config import ModelConfig
from gctf.model import DualBranchModel


@pytest.fixture(autouse=True)
def _float64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # 2 layers, d=8, T=2, 8x8 frames, patch 1x8x8
    return ModelConfig()


@pytest.fixture
def tiny_model(tiny_cfg):
    return DualBranchModel(tiny_cfg, np.random.default_rng(0))


@pytest.fixture
def tiny_video(rng):
    return rng.uniform(size=(3, 2, 8, 8))
