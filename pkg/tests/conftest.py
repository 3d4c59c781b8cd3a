import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dubflow import corpus

settings.register_profile(
    "dubflow",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dubflow"))


@pytest.fixture(scope="session")
def small_clips():
    """Thirty in-memory clips, seed 3."""
    return corpus.build_clips(30, 3)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    corpus.generate_corpus(20, 5, out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
