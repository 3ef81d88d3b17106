"""
MeSh：元梯度奖励塑形
双评论家、预测尺度 κ_S 与偏移 κ_O 的元塑形网络、元塑形奖励与闭式元梯度
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np

from .agents import (ActorCriticAgent, AgentConfig, action_gradients, actor_step,
                     lagrange_step_rc)
from .approximators import (Activation, MlpShape, ParamVector, activate, activation_derivative,
                            forward, grad_params, init_params, jacobian_params)
from .environments import CmdpSpec
from .metal import EmptyValidationError
from .replay import Batch, SeedLike, TransitionBatch


class RewardFormulation(str, Enum):
    OFFSET_ON_PENALTY = "offset_on_penalty"  # r - κ_S·λ̂·c + κ_O
    SCALE_WHOLE = "scale_whole"              # κ_S·(r - λ̂·c) + κ_O


@dataclass
class MeshConfig:
    lambda_hat: float = 0.1
    upsilon_S: float = 10.0
    upsilon_O: float = 3.0
    formulation: str = RewardFormulation.OFFSET_ON_PENALTY.value
    lr_meta: float = 1e-3
    lr_critic_in: float = 3e-4
    lr_critic_out: float = 3e-4
    meta_hidden: Tuple[int, ...] = (32,)

    def validate(self):
        if self.upsilon_S <= 0 or self.upsilon_O <= 0:
            raise ValueError("υ_S 和 υ_O 必须为正数")
        if self.lambda_hat < 0:
            raise ValueError(f"λ̂ 必须 >= 0: {self.lambda_hat}")
        if self.lr_meta < 0 or self.lr_critic_in <= 0 or self.lr_critic_out <= 0:
            raise ValueError("MeSh 学习率设置非法")
        RewardFormulation(self.formulation)


def meta_network_shape(spec: CmdpSpec, hidden: Tuple[int, ...] = (32,),
                       hidden_activation: str = "elu") -> MlpShape:
    """f_φ 输入 (s, a, r, c)，输出原始 κ̄_S 与 κ̄_O"""
    return MlpShape(spec.obs_dim + spec.act_dim + 2, tuple(hidden), 2,
                    hidden_activation=hidden_activation, output_activation=Activation.IDENTITY)


@dataclass(frozen=True)
class MetaShaper:
    """元塑形网络及其输出头"""
    phi: ParamVector
    shape: MlpShape
    lambda_hat: float = 0.1
    upsilon_S: float = 10.0
    upsilon_O: float = 3.0
    formulation: RewardFormulation = RewardFormulation.OFFSET_ON_PENALTY

    def __post_init__(self):
        object.__setattr__(self, "formulation", RewardFormulation(self.formulation))
        if self.shape.output_dim != 2:
            raise ValueError("元塑形网络必须输出两个标量头")

    def with_phi(self, values: np.ndarray) -> "MetaShaper":
        return replace(self, phi=self.phi.with_values(values))

    @staticmethod
    def inputs(batch: TransitionBatch) -> np.ndarray:
        return np.concatenate([batch.s, batch.a, batch.r_sum[:, None], batch.c_sum[:, None]], axis=1)

    def raw(self, batch: TransitionBatch) -> np.ndarray:
        return forward(self.phi, self.shape, self.inputs(batch))

    def kappas(self, batch: TransitionBatch) -> Tuple[np.ndarray, np.ndarray]:
        """κ_S = υ_S·σ(κ̄_S) ∈ (0, υ_S)，κ_O = υ_O·tanh(κ̄_O) ∈ (-υ_O, υ_O)"""
        raw = self.raw(batch)
        kappa_s = activate(Activation.SCALED_SIGMOID, raw[:, 0], self.upsilon_S)
        kappa_o = activate(Activation.SCALED_TANH, raw[:, 1], self.upsilon_O)
        return kappa_s, kappa_o

    def shaped_rewards(self, batch: TransitionBatch) -> np.ndarray:
        kappa_s, kappa_o = self.kappas(batch)
        if self.formulation == RewardFormulation.SCALE_WHOLE:
            return kappa_s * (batch.r_sum - self.lambda_hat * batch.c_sum) + kappa_o
        return batch.r_sum - kappa_s * self.lambda_hat * batch.c_sum + kappa_o

    def reward_gradient(self, batch: TransitionBatch, weights: np.ndarray) -> np.ndarray:
        """Σ_j weights_j·∇_φ r_meta_j"""
        z = self.inputs(batch)
        raw = forward(self.phi, self.shape, z)
        d_s = activation_derivative(Activation.SCALED_SIGMOID, raw[:, 0], self.upsilon_S)
        d_o = activation_derivative(Activation.SCALED_TANH, raw[:, 1], self.upsilon_O)
        if self.formulation == RewardFormulation.SCALE_WHOLE:
            dr_ds = batch.r_sum - self.lambda_hat * batch.c_sum
        else:
            dr_ds = -self.lambda_hat * batch.c_sum
        cot = np.stack([dr_ds * d_s, d_o], axis=1) * weights[:, None]
        return grad_params(self.phi, self.shape, z, cot)


def meta_shaped_reward(shaper: MetaShaper, s: np.ndarray, a: np.ndarray, r: float, c: float) -> float:
    """单条转移的元塑形奖励"""
    single = TransitionBatch(s=np.atleast_2d(np.asarray(s, dtype=np.float64)),
                             a=np.atleast_2d(np.asarray(a, dtype=np.float64)),
                             r_sum=np.array([float(r)]), c_sum=np.array([float(c)]),
                             s_next=np.atleast_2d(np.asarray(s, dtype=np.float64)),
                             discount_prod=np.zeros(1))
    return float(shaper.shaped_rewards(single)[0])


@dataclass(frozen=True)
class MeshActor:
    shape: MlpShape
    theta_a: ParamVector
    theta_a_target: ParamVector


@dataclass(frozen=True)
class MeshState:
    """元塑形网络、内/外层评论家（含目标网络）与外层拉格朗日乘子"""
    shaper: MetaShaper
    critic_shape: MlpShape
    theta_c_in: ParamVector
    theta_c_in_target: ParamVector
    theta_c_out: ParamVector
    theta_c_out_target: ParamVector
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"拉格朗日乘子必须 >= 0: {self.lam}")


class MeshInnerResult(NamedTuple):
    theta_c_in: ParamVector
    theta_c_out: ParamVector
    theta_a: ParamVector
    lam: float


def _bootstrap(theta_c_target: ParamVector, critic_shape: MlpShape, actor: MeshActor,
               batch: TransitionBatch) -> np.ndarray:
    next_actions = forward(actor.theta_a_target, actor.shape, batch.s_next)
    inputs = np.concatenate([batch.s_next, next_actions], axis=1)
    return forward(theta_c_target, critic_shape, inputs)[:, 0]


def inner_td_errors(state: MeshState, actor: MeshActor, train: TransitionBatch) -> np.ndarray:
    """元塑形 TD 误差 δ̂"""
    target_q = _bootstrap(state.theta_c_in_target, state.critic_shape, actor, train)
    q = forward(state.theta_c_in, state.critic_shape, train.critic_inputs)[:, 0]
    return state.shaper.shaped_rewards(train) + train.discount_prod * target_q - q


def outer_td_errors(state: MeshState, actor: MeshActor, train: TransitionBatch, lam: float) -> np.ndarray:
    target_q = _bootstrap(state.theta_c_out_target, state.critic_shape, actor, train)
    q = forward(state.theta_c_out, state.critic_shape, train.critic_inputs)[:, 0]
    return train.shaped_returns(lam) + train.discount_prod * target_q - q


def mesh_inner_update(state: MeshState, actor: MeshActor, train: TransitionBatch,
                      episode_penalty: float, beta: float, config: AgentConfig,
                      mesh_config: MeshConfig) -> MeshInnerResult:
    """
    内层更新，依次为：λ'、内层评论家（元塑形奖励）、外层评论家（λ' 塑形奖励）、
    actor（沿更新后的内层评论家做策略梯度）
    """
    lam_new = lagrange_step_rc(state.lam, episode_penalty, beta, config.lr_lagrange)
    n = len(train)
    inputs = train.critic_inputs

    delta_in = inner_td_errors(state, actor, train)
    grad_in = grad_params(state.theta_c_in, state.critic_shape, inputs, delta_in[:, None])
    theta_c_in = state.theta_c_in.axpy(2.0 * mesh_config.lr_critic_in / n, grad_in)

    delta_out = outer_td_errors(state, actor, train, lam_new)
    grad_out = grad_params(state.theta_c_out, state.critic_shape, inputs, delta_out[:, None])
    theta_c_out = state.theta_c_out.axpy(2.0 * mesh_config.lr_critic_out / n, grad_out)

    theta_a = actor_step(actor.theta_a, actor.shape, theta_c_in, state.critic_shape, train,
                         config.lr_actor)
    return MeshInnerResult(theta_c_in, theta_c_out, theta_a, lam_new)


def outer_targets(theta_a: ParamVector, actor_shape: MlpShape, theta_c_out: ParamVector,
                  critic_shape: MlpShape, validate: TransitionBatch) -> np.ndarray:
    """SG(∇_a Q_out(s, a') + a')，a' = π_θa'(s)"""
    actions = forward(theta_a, actor_shape, validate.s)
    return action_gradients(theta_c_out, critic_shape, validate.s, actions) + actions


def mesh_outer_loss(theta_a: ParamVector, actor_shape: MlpShape, theta_c_out: ParamVector,
                    critic_shape: MlpShape, validate: TransitionBatch,
                    targets: Optional[np.ndarray] = None) -> float:
    """
    验证集上的 D4PG actor 损失 ‖SG(∇_a Q_out + a') - a'‖² 的均值

    targets 给定时把它当作停止梯度的目标（有限差分校验用）
    """
    if validate is None or len(validate) == 0:
        raise EmptyValidationError("验证集为空，无法计算外层损失")
    actions = forward(theta_a, actor_shape, validate.s)
    if targets is None:
        targets = action_gradients(theta_c_out, critic_shape, validate.s, actions) + actions
    return float(np.mean(np.sum((targets - actions) ** 2, axis=1)))


def _mixed_action_param_grad(theta_c: ParamVector, critic_shape: MlpShape, states: np.ndarray,
                             actions: np.ndarray, directions: np.ndarray, step: float) -> np.ndarray:
    """Σ_i ∇_θ [d_iᵀ ∇_a Q(s_i, a_i; θ)]，沿动作方向对 grad_params 做中心差分"""
    scale = float(np.max(np.abs(directions))) if directions.size else 0.0
    if scale == 0.0:
        return np.zeros(len(theta_c))
    unit = directions / scale
    ones = np.ones((states.shape[0], 1))
    plus = grad_params(theta_c, critic_shape, np.concatenate([states, actions + step * unit], axis=1), ones)
    minus = grad_params(theta_c, critic_shape, np.concatenate([states, actions - step * unit], axis=1), ones)
    return scale * (plus - minus) / (2.0 * step)


def mesh_meta_gradient(state: MeshState, actor: MeshActor, updated: MeshInnerResult,
                       train: TransitionBatch, validate: TransitionBatch, config: AgentConfig,
                       mesh_config: MeshConfig, fd_step: float = 1e-6) -> np.ndarray:
    """
    ∇_φ J'(θ_a')，按链式法则组装：
      外层策略梯度项 u = ∇_θa' J'；
      actor 对内层评论家的敏感度（混合二阶导数，沿动作方向差分）；
      更新前内层评论家的 ∇_θ Q；
      κ 梯度 ∇_φ r_meta；
      以及系数 2·α_θa·α_θc,in
    """
    if validate is None or len(validate) == 0:
        raise EmptyValidationError("验证集为空，无法计算元梯度")
    n_train = len(train)
    if config.lr_actor == 0.0 or mesh_config.lr_critic_in == 0.0:
        return np.zeros(len(state.shaper.phi))

    actions_v = forward(updated.theta_a, actor.shape, validate.s)
    dq_da = action_gradients(updated.theta_c_out, state.critic_shape, validate.s, actions_v)
    u = -(2.0 / len(validate)) * grad_params(updated.theta_a, actor.shape, validate.s, dq_da)

    directions = jacobian_params(actor.theta_a, actor.shape, train.s) @ u
    actions_t = forward(actor.theta_a, actor.shape, train.s)
    w = (config.lr_actor / n_train) * _mixed_action_param_grad(
        updated.theta_c_in, state.critic_shape, train.s, actions_t, directions, fd_step)

    grads_in = grad_params(state.theta_c_in, state.critic_shape, train.critic_inputs,
                           np.ones((n_train, 1)), per_item=True)
    weights = grads_in @ w
    return (2.0 * mesh_config.lr_critic_in / n_train) * state.shaper.reward_gradient(train, weights)


def fd_mesh_oracle(state: MeshState, actor: MeshActor, batch: Batch, episode_penalty: float,
                   beta: float, config: AgentConfig, mesh_config: MeshConfig,
                   h: float = 1e-5) -> np.ndarray:
    """
    逐坐标中心差分：每个 φ 分量的扰动都完整重放 mesh_inner_update，
    外层目标固定在未扰动 φ 处（与停止梯度一致）
    """
    if h <= 0:
        raise ValueError(f"差分步长必须为正: {h}")
    base = mesh_inner_update(state, actor, batch.train, episode_penalty, beta, config, mesh_config)
    targets = outer_targets(base.theta_a, actor.shape, base.theta_c_out, state.critic_shape,
                            batch.validate)
    phi = state.shaper.phi.values
    grad = np.zeros_like(phi)

    def evaluate(values: np.ndarray) -> float:
        shifted = replace(state, shaper=state.shaper.with_phi(values))
        result = mesh_inner_update(shifted, actor, batch.train, episode_penalty, beta, config, mesh_config)
        return mesh_outer_loss(result.theta_a, actor.shape, result.theta_c_out, state.critic_shape,
                               batch.validate, targets)

    for k in range(phi.size):
        step = np.zeros_like(phi)
        step[k] = h
        grad[k] = (evaluate(phi + step) - evaluate(phi - step)) / (2.0 * h)
    return grad


class MeshAgent(ActorCriticAgent):
    """
    MeSh 智能体

    self.state 中的 theta_c 始终镜像外层评论家
    """

    kind = "mesh"

    def __init__(self, spec: CmdpSpec, config: AgentConfig, rng: SeedLike = None,
                 mesh_config: Optional[MeshConfig] = None):
        rng = np.random.default_rng(rng)
        super().__init__(spec, config, rng)
        self.logger = logging.getLogger(__name__)
        self.mesh_config = mesh_config or MeshConfig()
        self.mesh_config.validate()
        shape = meta_network_shape(spec, self.mesh_config.meta_hidden, config.hidden_activation)
        shaper = MetaShaper(init_params(shape, rng), shape, self.mesh_config.lambda_hat,
                            self.mesh_config.upsilon_S, self.mesh_config.upsilon_O,
                            RewardFormulation(self.mesh_config.formulation))
        critic = self.state.theta_c
        self.mesh = MeshState(shaper, self.state.critic_shape, critic.copy(), critic.copy(),
                              critic.copy(), critic.copy(), lam=0.0)

    @property
    def lam(self) -> float:
        return self.mesh.lam

    def actor_view(self) -> MeshActor:
        return MeshActor(self.state.actor_shape, self.state.theta_a, self.state.theta_a_target)

    def learn(self, batch: Batch, episode_penalty: float) -> Dict[str, Any]:
        beta = self.config.threshold_beta
        actor = self.actor_view()
        result = mesh_inner_update(self.mesh, actor, batch.train, episode_penalty, beta,
                                   self.config, self.mesh_config)
        info: Dict[str, Any] = {"lambda": result.lam, "lambda_hat": self.mesh_config.lambda_hat,
                                "J_C": episode_penalty}

        shaper = self.mesh.shaper
        if len(batch.validate) > 0:
            info["outer_loss"] = mesh_outer_loss(result.theta_a, actor.shape, result.theta_c_out,
                                                 self.mesh.critic_shape, batch.validate)
            if self.mesh_config.lr_meta != 0.0:
                grad = mesh_meta_gradient(self.mesh, actor, result, batch.train, batch.validate,
                                          self.config, self.mesh_config)
                shaper = shaper.with_phi(shaper.phi.values - self.mesh_config.lr_meta * grad)

        kappa_s, kappa_o = self.mesh.shaper.kappas(batch.train)
        info["kappa_S"] = float(np.mean(kappa_s))
        info["kappa_O"] = float(np.mean(kappa_o))
        info["inner_critic_loss"] = float(np.mean(inner_td_errors(self.mesh, actor, batch.train) ** 2))
        info["outer_critic_loss"] = float(np.mean(
            outer_td_errors(self.mesh, actor, batch.train, result.lam) ** 2))

        step = self.state.step_counter + 1
        sync = step % self.config.target_update_period == 0
        self.mesh = replace(
            self.mesh, shaper=shaper, theta_c_in=result.theta_c_in, theta_c_out=result.theta_c_out,
            theta_c_in_target=result.theta_c_in.copy() if sync else self.mesh.theta_c_in_target,
            theta_c_out_target=result.theta_c_out.copy() if sync else self.mesh.theta_c_out_target,
            lam=result.lam)
        self.state = replace(
            self.state, theta_a=result.theta_a, theta_c=result.theta_c_out, step_counter=step,
            theta_a_target=result.theta_a.copy() if sync else self.state.theta_a_target,
            theta_c_target=result.theta_c_out.copy() if sync else self.state.theta_c_target)

        self.last_info = info
        self.logger.debug(
            f"MeSh 迭代 {step}: λ={result.lam:.6f}, λ̂={self.mesh_config.lambda_hat}, "
            f"κ_S={info['kappa_S']:.4f}, κ_O={info['kappa_O']:.4f}, "
            f"L_in={info['inner_critic_loss']:.6f}, L_out={info['outer_critic_loss']:.6f}")
        return info
