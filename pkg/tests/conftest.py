import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scorenorm.core.lgsm import factorizations

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def factorization_counter():
    factorizations.reset()
    yield factorizations
    factorizations.reset()
