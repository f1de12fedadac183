import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("asst", max_examples=60, deadline=None)
settings.load_profile("asst")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
