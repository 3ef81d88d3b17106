"""
测试公共夹具：手算用的线性 actor/critic 与小规模实验配置
"""

import numpy as np
import pytest

from src.agents import ActorCritic, AgentConfig
from src.approximators import MlpShape, params_from_arrays
from src.environments import CmdpSpec
from src.replay import Batch, TransitionBatch
from src.trainer import ExperimentConfig


@pytest.fixture
def linear_critic_shape():
    """Q(s, a) = w_s·s + w_a·a，无偏置"""
    return MlpShape(2, (), 1, use_bias=False)


@pytest.fixture
def linear_actor_shape():
    """π(s) = θ·s，无偏置、恒等输出"""
    return MlpShape(1, (), 1, use_bias=False)


def single_transition(s=1.0, a=0.0, r=1.0, c=1.0, s_next=0.8, discount=0.9) -> TransitionBatch:
    return TransitionBatch(s=np.array([[s]]), a=np.array([[a]]), r_sum=np.array([r]),
                           c_sum=np.array([c]), s_next=np.array([[s_next]]),
                           discount_prod=np.array([discount]))


@pytest.fixture
def worked_batch():
    """训练集与验证集是同一条转移"""
    item = single_transition()
    return Batch(train=item, validate=item)


@pytest.fixture
def worked_state(linear_critic_shape, linear_actor_shape):
    """θ_c = θ_T = 0.5（动作权重为 0），actor 全零"""
    critic = params_from_arrays(linear_critic_shape, {"W0": [[0.5], [0.0]]})
    actor = params_from_arrays(linear_actor_shape, {"W0": [[0.0]]})
    return ActorCritic(linear_actor_shape, linear_critic_shape, actor, critic, actor.copy(),
                       critic.copy(), lam=0.2)


@pytest.fixture
def small_spec():
    return CmdpSpec(obs_dim=2, act_dim=1, episode_len=20, action_low=(-1.0,), action_high=(1.0,))


@pytest.fixture
def tiny_agent_config():
    return AgentConfig(lr_actor=1e-3, lr_critic=1e-3, lr_lagrange=1e-2, target_update_period=10,
                       batch_size=8, warmup=16, replay_capacity=500, penalty_capacity=20,
                       actor_hidden=(8,), critic_hidden=(8,))


@pytest.fixture
def random_batch_factory():
    def make(seed: int, n_train: int = 6, n_validate: int = 2, obs_dim: int = 2) -> Batch:
        rng = np.random.default_rng(seed)

        def part(n):
            return TransitionBatch(s=rng.normal(size=(n, obs_dim)), a=rng.uniform(-1, 1, size=(n, 1)),
                                   r_sum=rng.uniform(0, 2, size=n), c_sum=rng.uniform(0, 2, size=n),
                                   s_next=rng.normal(size=(n, obs_dim)),
                                   discount_prod=rng.uniform(0.5, 0.99, size=n))
        return Batch(train=part(n_train), validate=part(n_validate))
    return make


@pytest.fixture
def tiny_experiment(tmp_path, tiny_agent_config):
    return ExperimentConfig(agent="rc", episode_len=20, episodes=6, window=3, kappa=20.0, seeds=(0,),
                            output_dir=str(tmp_path), progress_every=0, agent_config=tiny_agent_config)
