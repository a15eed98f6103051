import numpy as np
import pytest

from src.envs import TokenMDP, make_bandit_task
from src.policy import TabularPolicy


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def bandit():
    return make_bandit_task(0, 5, seed=11)


@pytest.fixture
def token_task():
    return TokenMDP(0, vocab_size=4, horizon=3, target=(1, 2, 3), partial_credit=True)


@pytest.fixture
def random_policy(rng):
    def build(num_states=1, num_actions=4, scale=1.0):
        return TabularPolicy.random(num_states, num_actions, rng, scale)

    return build


@pytest.fixture
def small_config():
    """一个几秒内能跑完的实验配置（原始 dict 形式）"""
    return {
        "schema_version": 1,
        "name": "tiny",
        "environment": {"kind": "bandit_generated", "num_arms": 5, "task_seed": 7, "init": {"kind": "random", "scale": 1.0, "seed": 0}},
        "train": {"algorithm": "GRPO", "learning_rate": 0.5, "group_size": 4, "iterations": 10, "epochs": 2, "minibatch_size": 2},
        "seeds": 3,
    }
