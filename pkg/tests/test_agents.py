"""actor-critic 更新、拉格朗日乘子与智能体之间的退化关系测试"""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.agents import (ActorCriticAgent, AgentConfig, RcD4pgAgent, RewardShapingAgent,
                        actor_shape_for, actor_step, critic_loss, critic_step, lagrange_step_rc,
                        target_sync)
from src.approximators import (forward, numeric_grad, params_from_arrays,
                               zeros_like_shape)

from .conftest import single_transition


def test_critic_loss_hand_instance(linear_critic_shape):
    theta = params_from_arrays(linear_critic_shape, {"W0": [[0.5], [0.0]]})
    loss, delta = critic_loss(theta, linear_critic_shape, single_transition(), np.array([0.4]), 0.2)
    assert delta[0] == pytest.approx(0.66)
    assert loss == pytest.approx(0.4356)


def test_critic_loss_rejects_negative_lambda(linear_critic_shape):
    theta = zeros_like_shape(linear_critic_shape)
    with pytest.raises(ValueError):
        critic_loss(theta, linear_critic_shape, single_transition(), np.array([0.0]), -0.1)


def test_critic_step_hand_instance(linear_critic_shape):
    theta = params_from_arrays(linear_critic_shape, {"W0": [[0.5], [0.0]]})
    updated = critic_step(theta, linear_critic_shape, single_transition(), np.array([0.4]), 0.2, 0.1)
    assert updated.values[0] == pytest.approx(0.632)
    assert updated.values[1] == 0.0


def test_critic_step_stationary_at_zero_td(linear_critic_shape):
    theta = params_from_arrays(linear_critic_shape, {"W0": [[0.5], [0.0]]})
    # r - λc + γ·Q_T = 0.5 = Q
    item = single_transition(r=0.5, c=0.0, discount=0.0)
    updated = critic_step(theta, linear_critic_shape, item, np.array([0.0]), 0.0, 0.1)
    np.testing.assert_array_equal(updated.values, theta.values)


def test_critic_step_descends(small_spec, tiny_agent_config, random_batch_factory):
    from src.agents import build_actor_critic, target_values
    state = build_actor_critic(small_spec, tiny_agent_config, 0)
    train = random_batch_factory(1).train
    target_q = target_values(state, train)
    before, _ = critic_loss(state.theta_c, state.critic_shape, train, target_q, 0.3)
    theta = critic_step(state.theta_c, state.critic_shape, train, target_q, 0.3, 1e-3)
    after, _ = critic_loss(theta, state.critic_shape, train, target_q, 0.3)
    assert after < before


def test_actor_step_hand_instance(linear_critic_shape, linear_actor_shape):
    critic = params_from_arrays(linear_critic_shape, {"W0": [[0.0], [1.0]]})
    actor = params_from_arrays(linear_actor_shape, {"W0": [[0.0]]})
    updated = actor_step(actor, linear_actor_shape, critic, linear_critic_shape, single_transition(), 0.1)
    assert updated.values[0] == pytest.approx(0.1)

    flat = params_from_arrays(linear_critic_shape, {"W0": [[3.0], [0.0]]})
    unchanged = actor_step(actor, linear_actor_shape, flat, linear_critic_shape, single_transition(), 0.1)
    np.testing.assert_array_equal(unchanged.values, actor.values)


def test_actor_step_matches_finite_differences(small_spec, tiny_agent_config, random_batch_factory):
    from src.agents import build_actor_critic
    state = build_actor_critic(small_spec, tiny_agent_config, 3)
    batch = random_batch_factory(2).train
    lr = 0.01

    def mean_q(values):
        actions = forward(state.theta_a.with_values(values), state.actor_shape, batch.s)
        inputs = np.concatenate([batch.s, actions], axis=1)
        return float(np.mean(forward(state.theta_c, state.critic_shape, inputs)))

    updated = actor_step(state.theta_a, state.actor_shape, state.theta_c, state.critic_shape, batch, lr)
    np.testing.assert_allclose((updated.values - state.theta_a.values) / lr,
                               numeric_grad(mean_q, state.theta_a.values), rtol=1e-5, atol=1e-9)


def test_target_sync_period(worked_state):
    moved = replace(worked_state, theta_c=worked_state.theta_c.axpy(1.0, np.ones(2)), step_counter=99)
    assert target_sync(moved, 100) is moved
    synced = target_sync(replace(moved, step_counter=100), 100)
    np.testing.assert_array_equal(synced.theta_c_target.values, synced.theta_c.values)
    again = target_sync(synced, 100)
    np.testing.assert_array_equal(again.theta_c_target.values, synced.theta_c_target.values)


def test_lagrange_step_rc_examples():
    assert lagrange_step_rc(0.5, 0.3, 0.1, 0.01) == pytest.approx(0.502)
    assert lagrange_step_rc(0.5, 0.1, 0.1, 0.01) == 0.5
    assert lagrange_step_rc(0.001, 0.1, 0.3, 0.01) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(1e-6, 1.0))
def test_lagrange_step_never_negative(lam, penalty, beta, lr):
    assert lagrange_step_rc(lam, penalty, beta, lr) >= 0.0


def test_act_without_exploration_is_deterministic(small_spec, tiny_agent_config):
    agent = ActorCriticAgent(small_spec, tiny_agent_config, 0)
    obs = np.array([0.3, -0.1])
    np.testing.assert_array_equal(agent.act(obs, explore=False),
                                  forward(agent.state.theta_a, agent.state.actor_shape, obs))
    noisy_a = agent.act(obs, explore=True, rng=7)
    np.testing.assert_array_equal(noisy_a, agent.act(obs, explore=True, rng=7))


def test_zero_actor_outputs_zero(small_spec, tiny_agent_config):
    shape = actor_shape_for(small_spec, tiny_agent_config)
    np.testing.assert_array_equal(forward(zeros_like_shape(shape), shape, np.array([0.5, 0.5])), [0.0])


def test_config_validation():
    assert AgentConfig().validate()  # 默认学习率顺序会给出警告
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.0).validate()
    with pytest.raises(ValueError):
        AgentConfig(warmup=10, batch_size=64).validate()
    with pytest.raises(ValueError):
        AgentConfig(learner_period=0).validate()


def _run_learns(agent, batches, penalties):
    for batch, penalty in zip(batches, penalties):
        agent.learn(batch, penalty)
    return agent


def test_frozen_rc_equals_reward_shaping(small_spec, tiny_agent_config, random_batch_factory):
    config = replace(tiny_agent_config, fixed_lambda=2.0)
    batches = [random_batch_factory(i) for i in range(25)]
    penalties = np.linspace(0.0, 1.0, 25)
    rs = _run_learns(RewardShapingAgent(small_spec, config, 11), batches, penalties)
    rc = _run_learns(RcD4pgAgent(small_spec, config, 11, initial_lambda=2.0, lagrange_enabled=False),
                     batches, penalties)
    assert rs.lam == rc.lam == 2.0
    np.testing.assert_array_equal(rs.state.theta_c.values, rc.state.theta_c.values)
    np.testing.assert_array_equal(rs.state.theta_a.values, rc.state.theta_a.values)


def test_rc_at_zero_lambda_equals_d4pg(small_spec, tiny_agent_config, random_batch_factory):
    batches = [random_batch_factory(i) for i in range(25)]
    penalties = [0.0] * 25  # J_C < β，λ 保持 0
    rc = _run_learns(RcD4pgAgent(small_spec, tiny_agent_config, 5), batches, penalties)
    d4pg = _run_learns(ActorCriticAgent(small_spec, tiny_agent_config, 5), batches, penalties)
    assert rc.lam == 0.0
    np.testing.assert_array_equal(rc.state.theta_c.values, d4pg.state.theta_c.values)
    np.testing.assert_array_equal(rc.state.theta_c_target.values, d4pg.state.theta_c_target.values)


def test_rc_lambda_tracks_violations(small_spec, tiny_agent_config, random_batch_factory):
    agent = RcD4pgAgent(small_spec, tiny_agent_config, 0)
    for i in range(20):
        agent.learn(random_batch_factory(i), 0.6)
        assert agent.lam >= 0.0
    assert agent.lam == pytest.approx(20 * 0.01 * 0.5)
    assert agent.alpha_lambda == 0.0
    assert agent.scaled_lr == tiny_agent_config.lr_lagrange
