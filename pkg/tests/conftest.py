import numpy as np
import pytest

from sstune.harness import SYNTH_PREDICTOR
from sstune.synth import SyntheticConfig, synth_generate


@pytest.fixture(scope="session")
def small_set():
    """(catalog, text, support, tests) at C=5, K=4, T=8, d=16, V=8 with outliers."""
    cfg = SyntheticConfig(view_noise=0.3, outlier_fraction=0.25, outlier_distance=0.8, seed=3, num_tests=6)
    return synth_generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def synth_config():
    return SYNTH_PREDICTOR
