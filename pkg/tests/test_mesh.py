"""MeSh 元塑形奖励、双评论家内层更新与元梯度测试"""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.agents import AgentConfig
from src.approximators import MlpShape, params_from_arrays, zeros_like_shape
from src.environments import CmdpSpec
from src.gradcheck import random_mesh_instance, run_suite
from src.mesh import (MeshActor, MeshAgent, MeshConfig, MeshState, MetaShaper, RewardFormulation,
                      fd_mesh_oracle, inner_td_errors, mesh_inner_update, mesh_meta_gradient,
                      mesh_outer_loss, meta_network_shape, meta_shaped_reward, outer_td_errors)
from src.metal import EmptyValidationError
from src.replay import Batch

from .conftest import single_transition


HAND_SPEC = CmdpSpec(1, 1, 10, (-1.0,), (1.0,))
HAND_CONFIG = AgentConfig(lr_actor=0.1, lr_critic=0.1, lr_lagrange=0.01)
HAND_MESH = MeshConfig(lambda_hat=0.1, upsilon_S=10.0, upsilon_O=3.0, lr_critic_in=0.1,
                       lr_critic_out=0.1)


def shaper_with_raw(raw_s: float = 0.0, raw_o: float = 0.0, **kwargs) -> MetaShaper:
    """线性元塑形网络，权重为零，偏置直接给出 κ̄_S、κ̄_O"""
    shape = meta_network_shape(HAND_SPEC, hidden=())
    phi = params_from_arrays(shape, {"W0": np.zeros((4, 2)), "b0": [[raw_s, raw_o]]})
    return MetaShaper(phi, shape, **kwargs)


def hand_state(linear_critic_shape, critic_in, critic_out, lam=0.2, **shaper_kwargs) -> MeshState:
    c_in = params_from_arrays(linear_critic_shape, {"W0": critic_in})
    c_out = params_from_arrays(linear_critic_shape, {"W0": critic_out})
    return MeshState(shaper_with_raw(**shaper_kwargs), linear_critic_shape, c_in, c_in.copy(),
                     c_out, c_out.copy(), lam=lam)


def hand_actor(linear_actor_shape, theta=0.0) -> MeshActor:
    params = params_from_arrays(linear_actor_shape, {"W0": [[theta]]})
    return MeshActor(linear_actor_shape, params, params.copy())


def test_meta_shaped_reward_examples():
    shaper = shaper_with_raw()
    kappa_s, kappa_o = shaper.kappas(single_transition())
    assert kappa_s[0] == pytest.approx(5.0)
    assert kappa_o[0] == 0.0
    assert meta_shaped_reward(shaper, [1.0], [0.0], 1.0, 1.0) == pytest.approx(0.5)
    assert meta_shaped_reward(shaper, [1.0], [0.0], 0.7, 0.0) == pytest.approx(0.7)


def test_scale_whole_formulation():
    shaper = shaper_with_raw(formulation=RewardFormulation.SCALE_WHOLE)
    # κ_S·(r - λ̂c) + κ_O = 5·(1 - 0.1)
    assert meta_shaped_reward(shaper, [1.0], [0.0], 1.0, 1.0) == pytest.approx(4.5)


def test_offset_saturates():
    _, kappa_o = shaper_with_raw(raw_o=50.0).kappas(single_transition())
    assert kappa_o[0] == pytest.approx(3.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10.0, 10.0), st.floats(-10.0, 10.0), st.floats(0.5, 20.0), st.floats(0.5, 5.0))
def test_kappas_stay_in_range(raw_s, raw_o, upsilon_s, upsilon_o):
    shaper = shaper_with_raw(raw_s, raw_o, upsilon_S=upsilon_s, upsilon_O=upsilon_o)
    kappa_s, kappa_o = shaper.kappas(single_transition())
    assert 0.0 < kappa_s[0] < upsilon_s
    assert -upsilon_o < kappa_o[0] < upsilon_o


def test_random_shaper_kappas_in_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        state, _, batch, *_ = random_mesh_instance(rng)
        kappa_s, kappa_o = state.shaper.kappas(batch.train)
        assert np.all((kappa_s > 0.0) & (kappa_s < state.shaper.upsilon_S))
        assert np.all(np.abs(kappa_o) < state.shaper.upsilon_O)


def test_outer_loss_hand_instance(linear_critic_shape, linear_actor_shape):
    actor = params_from_arrays(linear_actor_shape, {"W0": [[0.3]]})
    critic = params_from_arrays(linear_critic_shape, {"W0": [[0.0], [0.2]]})
    item = single_transition()
    assert mesh_outer_loss(actor, linear_actor_shape, critic, linear_critic_shape, item) == pytest.approx(0.04)

    flat = params_from_arrays(linear_critic_shape, {"W0": [[0.7], [0.0]]})
    assert mesh_outer_loss(actor, linear_actor_shape, flat, linear_critic_shape, item) == 0.0


def test_outer_loss_ignores_constant_offset(linear_actor_shape, random_batch_factory):
    shape = MlpShape(2, (), 1)
    actor = params_from_arrays(linear_actor_shape, {"W0": [[0.4]]})
    validate = random_batch_factory(0, obs_dim=1).validate
    base = params_from_arrays(shape, {"W0": [[0.3], [0.2]], "b0": [[0.0]]})
    shifted = params_from_arrays(shape, {"W0": [[0.3], [0.2]], "b0": [[5.0]]})
    assert mesh_outer_loss(actor, linear_actor_shape, base, shape, validate) == pytest.approx(
        mesh_outer_loss(actor, linear_actor_shape, shifted, shape, validate))


def test_outer_loss_rejects_empty_validation(linear_critic_shape, linear_actor_shape):
    actor = zeros_like_shape(linear_actor_shape)
    critic = zeros_like_shape(linear_critic_shape)
    empty = single_transition().subset(np.arange(0))
    with pytest.raises(EmptyValidationError):
        mesh_outer_loss(actor, linear_actor_shape, critic, linear_critic_shape, empty)


def test_inner_update_hand_instance(linear_critic_shape, linear_actor_shape):
    state = hand_state(linear_critic_shape, [[0.5], [0.0]], [[0.5], [0.0]])
    actor = hand_actor(linear_actor_shape)
    train = single_transition()
    assert inner_td_errors(state, actor, train)[0] == pytest.approx(0.36)

    result = mesh_inner_update(state, actor, train, 0.3, 0.1, HAND_CONFIG, HAND_MESH)
    assert result.lam == pytest.approx(0.202)
    assert result.theta_c_in.values[0] == pytest.approx(0.572)
    assert result.theta_c_out.values[0] == pytest.approx(0.6316)
    # 内层评论家对动作无梯度，actor 不动
    assert result.theta_a.values[0] == 0.0


def test_inner_and_outer_critics_coincide(linear_critic_shape, linear_actor_shape):
    # κ_S·λ̂ = 5·0.1 = 0.5 = λ'，κ_O = 0
    state = hand_state(linear_critic_shape, [[0.5], [0.1]], [[0.5], [0.1]], lam=0.5)
    actor = hand_actor(linear_actor_shape, 0.2)
    train = single_transition()
    result = mesh_inner_update(state, actor, train, 0.1, 0.1, HAND_CONFIG, HAND_MESH)
    assert result.lam == 0.5
    np.testing.assert_allclose(result.theta_c_in.values, result.theta_c_out.values, rtol=1e-12)


def test_zero_penalty_batch_makes_targets_equal(linear_critic_shape, linear_actor_shape):
    state = hand_state(linear_critic_shape, [[0.5], [0.1]], [[0.5], [0.1]], lam=0.7)
    actor = hand_actor(linear_actor_shape, 0.2)
    train = single_transition(c=0.0)
    np.testing.assert_allclose(inner_td_errors(state, actor, train),
                               outer_td_errors(state, actor, train, 0.9), rtol=1e-12)


def test_frozen_shaper_matches_reward_shaping_target(linear_critic_shape, linear_actor_shape):
    # κ_O ≡ 0 且 κ_S·λ̂ = 0.5：内层目标即 λ̄ = 0.5 时的 RS 塑形目标
    state = hand_state(linear_critic_shape, [[0.5], [0.1]], [[0.5], [0.1]])
    train = single_transition(c=0.4)
    np.testing.assert_allclose(state.shaper.shaped_rewards(train), train.shaped_returns(0.5))


def test_outer_critic_ignores_meta_parameters():
    rng = np.random.default_rng(3)
    state, actor, batch, penalty, beta, config, mesh_config = random_mesh_instance(rng)
    base = mesh_inner_update(state, actor, batch.train, penalty, beta, config, mesh_config)
    perturbed = replace(state, shaper=state.shaper.with_phi(
        state.shaper.phi.values + rng.normal(size=len(state.shaper.phi))))
    moved = mesh_inner_update(perturbed, actor, batch.train, penalty, beta, config, mesh_config)
    np.testing.assert_array_equal(moved.theta_c_out.values, base.theta_c_out.values)
    assert moved.lam == base.lam
    assert not np.array_equal(moved.theta_c_in.values, base.theta_c_in.values)


def test_meta_gradient_vanishes_without_penalty_and_saturated_offset():
    rng = np.random.default_rng(5)
    state, actor, batch, penalty, beta, config, mesh_config = random_mesh_instance(rng)
    mesh_config = replace(mesh_config, formulation=RewardFormulation.OFFSET_ON_PENALTY.value)
    obs_dim = batch.train.s.shape[1]
    shape = meta_network_shape(CmdpSpec(obs_dim, 1, 10, (-1.0,), (1.0,)), hidden=())
    phi = params_from_arrays(shape, {"W0": np.zeros((shape.input_dim, 2)), "b0": [[0.3, 50.0]]})
    shaper = MetaShaper(phi, shape, mesh_config.lambda_hat, mesh_config.upsilon_S,
                        mesh_config.upsilon_O, RewardFormulation.OFFSET_ON_PENALTY)
    train = replace(batch.train, c_sum=np.zeros(len(batch.train)))
    state = replace(state, shaper=shaper)
    updated = mesh_inner_update(state, actor, train, penalty, beta, config, mesh_config)
    grad = mesh_meta_gradient(state, actor, updated, train, batch.validate, config, mesh_config)
    np.testing.assert_array_equal(grad, np.zeros(len(phi)))


def test_zero_scale_anchor_removes_scale_path():
    rng = np.random.default_rng(8)
    state, actor, batch, penalty, beta, config, mesh_config = random_mesh_instance(rng)
    mesh_config = replace(mesh_config, lambda_hat=0.0,
                          formulation=RewardFormulation.OFFSET_ON_PENALTY.value)
    grads = []
    for upsilon_s in (2.0, 8.0):
        shaper = replace(state.shaper, lambda_hat=0.0, upsilon_S=upsilon_s,
                         formulation=RewardFormulation.OFFSET_ON_PENALTY)
        shifted = replace(state, shaper=shaper)
        updated = mesh_inner_update(shifted, actor, batch.train, penalty, beta, config, mesh_config)
        grads.append(mesh_meta_gradient(shifted, actor, updated, batch.train, batch.validate, config,
                                        mesh_config))
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("frozen", ["lr_actor", "lr_critic_in"])
def test_zero_learning_rates_give_zero_gradient(frozen):
    rng = np.random.default_rng(13)
    state, actor, batch, penalty, beta, config, mesh_config = random_mesh_instance(rng)
    if frozen == "lr_actor":
        config = replace(config, lr_actor=0.0)
    else:
        mesh_config = replace(mesh_config, lr_critic_in=0.0)
    updated = mesh_inner_update(state, actor, batch.train, penalty, beta, config, mesh_config)
    closed = mesh_meta_gradient(state, actor, updated, batch.train, batch.validate, config, mesh_config)
    oracle = fd_mesh_oracle(state, actor, batch, penalty, beta, config, mesh_config)
    np.testing.assert_array_equal(closed, np.zeros(len(state.shaper.phi)))
    np.testing.assert_array_equal(oracle, np.zeros(len(state.shaper.phi)))


def test_hand_instance_matches_oracle(linear_critic_shape, linear_actor_shape):
    state = hand_state(linear_critic_shape, [[0.5], [0.3]], [[0.4], [0.2]], raw_s=0.2, raw_o=-0.1)
    actor = hand_actor(linear_actor_shape, 0.1)
    item = single_transition(a=0.5, c=0.5)
    batch = Batch(train=item, validate=single_transition(s=0.6, c=0.2))
    updated = mesh_inner_update(state, actor, batch.train, 0.3, 0.1, HAND_CONFIG, HAND_MESH)
    closed = mesh_meta_gradient(state, actor, updated, batch.train, batch.validate, HAND_CONFIG, HAND_MESH)
    oracle = fd_mesh_oracle(state, actor, batch, 0.3, 0.1, HAND_CONFIG, HAND_MESH)
    assert np.any(closed != 0.0)
    np.testing.assert_allclose(closed, oracle, rtol=1e-4, atol=1e-8)


def test_mesh_suite_passes():
    report = run_suite("mesh", 50, seed=0)
    assert report.passed, report.summary()


def test_oracle_rejects_bad_step():
    rng = np.random.default_rng(0)
    state, actor, batch, penalty, beta, config, mesh_config = random_mesh_instance(rng)
    with pytest.raises(ValueError):
        fd_mesh_oracle(state, actor, batch, penalty, beta, config, mesh_config, h=0.0)


def test_mesh_agent_telemetry(small_spec, tiny_agent_config, random_batch_factory):
    mesh_config = MeshConfig(meta_hidden=(4,), lr_meta=1e-2, lr_critic_in=1e-3, lr_critic_out=1e-3)
    agent = MeshAgent(small_spec, tiny_agent_config, 0, mesh_config)
    phi_before = agent.mesh.shaper.phi.values.copy()
    for i in range(12):
        info = agent.learn(random_batch_factory(i), 0.6)
        assert agent.lam >= 0.0
        assert 0.0 < info["kappa_S"] < mesh_config.upsilon_S
        assert abs(info["kappa_O"]) < mesh_config.upsilon_O
    assert {"lambda", "lambda_hat", "outer_loss", "inner_critic_loss", "outer_critic_loss"} <= set(info)
    assert info["lambda_hat"] == mesh_config.lambda_hat
    assert agent.state.theta_c is agent.mesh.theta_c_out
    assert not np.array_equal(agent.mesh.shaper.phi.values, phi_before)
    # 目标网络每 10 次迭代硬同步
    assert agent.state.step_counter == 12
    np.testing.assert_array_equal(agent.state.theta_c_target.values, agent.mesh.theta_c_out_target.values)


def test_mesh_config_validation():
    with pytest.raises(ValueError):
        MeshConfig(upsilon_S=0.0).validate()
    with pytest.raises(ValueError):
        MeshConfig(formulation="bogus").validate()
