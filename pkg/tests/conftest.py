import numpy as np
import pytest

from grpolab import policy as pol
from grpolab.env import build_env


@pytest.fixture
def two_token_env():
    """One decision between ``[eos]`` (reward 0) and ``[0, eos]`` (reward 1)."""
    return build_env(2, 2, 1, eos_id=1, targets={0: [0]})


@pytest.fixture
def small_env():
    """Three prompts, seven outputs each, bounded random rewards."""
    return build_env(3, 3, 3, reward_rule="bounded-random", reward_seed=4)


@pytest.fixture
def binary_env():
    return build_env(3, 3, 2, reward_rule="binary-random", reward_seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_policy(env, seed, scale=1.0):
    return pol.random_params(env, scale, np.random.default_rng(seed))
