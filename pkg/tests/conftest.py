import numpy as np
import pytest

from kvgrpo.checks import CheckInstance, make_instance
from kvgrpo.network import NetworkShape, param_init


TINY = NetworkShape(latent_dim=3, hidden_dim=5, prompt_dim=2)


@pytest.fixture
def tiny_params():
    return param_init(TINY, seed=7)


@pytest.fixture
def tiny_prompt():
    return np.array([0.3, -0.2])


@pytest.fixture(scope="session")
def check_instance() -> CheckInstance:
    """One shared small rollout group with rewards, for gradient/policy tests."""
    return make_instance(seed=11)
