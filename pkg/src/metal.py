"""
MetaL：元学习拉格朗日乘子学习率
指数化元参数 α_λ、内层更新、外层损失、闭式元梯度及其有限差分校验
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Tuple

import numpy as np

from .agents import (ActorCritic, AgentConfig, RcD4pgAgent, actor_step, critic_step,
                     target_sync, target_values, td_errors)
from .approximators import forward, grad_params
from .environments import CmdpSpec
from .replay import Batch, SeedLike, TransitionBatch


class EmptyValidationError(ValueError):
    """验证集为空，无法计算外层损失"""


class OuterLossKind(str, Enum):
    CRITIC_ONLY = "critic_only"
    ACTOR_ONLY = "actor_only"
    ACTOR_PLUS_CRITIC = "actor_plus_critic"


@dataclass(frozen=True)
class MetaState:
    """
    元状态：α_λ 无界，有效学习率 α₁·exp(α_λ) 恒为正
    """
    alpha_lambda: float = 0.0
    lam: float = 0.0
    lr_meta: float = 0.2
    lr_lagrange_base: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"拉格朗日乘子必须 >= 0: {self.lam}")
        if self.lr_meta < 0 or self.lr_lagrange_base < 0:
            raise ValueError("学习率不能为负")

    @property
    def effective_lr(self) -> float:
        return self.lr_lagrange_base * np.exp(self.alpha_lambda)


def _raw_lagrange(meta: MetaState, episode_penalty: float, beta: float) -> float:
    return meta.lam - meta.effective_lr * (beta - episode_penalty)


def lagrange_step_metal(meta: MetaState, episode_penalty: float, beta: float) -> float:
    """λ' = max(0, λ - α₁·exp(α_λ)·(β - J_C))"""
    return max(0.0, _raw_lagrange(meta, episode_penalty, beta))


def inner_update(state: ActorCritic, meta: MetaState, train: TransitionBatch,
                 episode_penalty: float, beta: float, config: AgentConfig) -> Tuple[ActorCritic, float]:
    """
    内层更新：先算 λ'，再用 λ' 更新评论家，actor 使用更新前的评论家

    不推进步数计数，也不同步目标网络，便于有限差分重放
    """
    lam_new = lagrange_step_metal(meta, episode_penalty, beta)
    target_q = target_values(state, train)
    theta_c = critic_step(state.theta_c, state.critic_shape, train, target_q, lam_new,
                          config.lr_critic)
    theta_a = actor_step(state.theta_a, state.actor_shape, state.theta_c, state.critic_shape,
                         train, config.lr_actor)
    return replace(state, theta_a=theta_a, theta_c=theta_c, lam=lam_new), lam_new


def _require_validation(validate: TransitionBatch):
    if validate is None or len(validate) == 0:
        raise EmptyValidationError("验证集为空，无法计算外层损失")


def _actor_inputs(state: ActorCritic, validate: TransitionBatch) -> np.ndarray:
    actions = forward(state.theta_a, state.actor_shape, validate.s)
    return np.concatenate([validate.s, actions], axis=1)


def outer_loss(updated: ActorCritic, lam_new: float, validate: TransitionBatch,
               kind: OuterLossKind = OuterLossKind.CRITIC_ONLY) -> float:
    """
    外层损失

    critic_only: 验证集上 (θ_c', λ') 处塑形 TD 误差平方的均值；
    actor_only: -E[Q_θc'(s, π_θa'(s))]；actor_plus_critic: 两者之和
    """
    _require_validation(validate)
    kind = OuterLossKind(kind)
    total = 0.0
    if kind in (OuterLossKind.CRITIC_ONLY, OuterLossKind.ACTOR_PLUS_CRITIC):
        target_q = target_values(updated, validate)
        delta = td_errors(updated.theta_c, updated.critic_shape, validate, target_q, lam_new)
        total += float(np.mean(delta ** 2))
    if kind in (OuterLossKind.ACTOR_ONLY, OuterLossKind.ACTOR_PLUS_CRITIC):
        q = forward(updated.theta_c, updated.critic_shape, _actor_inputs(updated, validate))[:, 0]
        total += float(-np.mean(q))
    return total


def lambda_sensitivity(meta: MetaState, episode_penalty: float, beta: float) -> float:
    """∂λ'/∂α_λ；投影生效时取 0"""
    if _raw_lagrange(meta, episode_penalty, beta) <= 0.0:
        return 0.0
    return meta.effective_lr * (episode_penalty - beta)


def metal_meta_gradient(state: ActorCritic, meta: MetaState, lam_new: float, updated: ActorCritic,
                        train: TransitionBatch, validate: TransitionBatch, episode_penalty: float,
                        beta: float, config: AgentConfig,
                        kind: OuterLossKind = OuterLossKind.CRITIC_ONLY) -> float:
    """
    外层损失对 α_λ 的闭式导数

    critic_only 时逐条验证项为
        2δ'_v·(-c_v + (2α_θc/|T|)·Σ_i c_i·⟨∇Q'(x_v), ∇Q(x_i)⟩)·∂λ'/∂α_λ
    训练集与验证集为同一条转移时即
        -2δ·c·α₁e^{α_λ}(J_C - β)·(-2α_θc⟨∇Q', ∇Q⟩ + 1)

    Args:
        state: 内层更新前的学习器状态
        meta: 本次迭代的元状态
        lam_new: 内层更新得到的 λ'
        updated: 内层更新后的状态（提供 θ_c'、θ_a'）
        train: 训练集
        validate: 验证集
        episode_penalty: 本次迭代用于 λ 更新的 J_C
        beta: 约束阈值
        config: 智能体配置（提供 α_θc）
        kind: 外层损失类型

    Returns:
        float: ∂J'/∂α_λ
    """
    _require_validation(validate)
    kind = OuterLossKind(kind)
    d_lambda = lambda_sensitivity(meta, episode_penalty, beta)
    if d_lambda == 0.0:
        return 0.0

    # dθ_c'/dλ' = -(2α_θc/|T|)·Σ_i c_i ∇_θc Q(x_i)
    direction = -(2.0 * config.lr_critic / len(train)) * grad_params(
        state.theta_c, state.critic_shape, train.critic_inputs, train.c_sum[:, None])

    d_loss = 0.0
    if kind in (OuterLossKind.CRITIC_ONLY, OuterLossKind.ACTOR_PLUS_CRITIC):
        target_q = target_values(updated, validate)
        delta = td_errors(updated.theta_c, updated.critic_shape, validate, target_q, lam_new)
        grads_v = grad_params(updated.theta_c, updated.critic_shape, validate.critic_inputs,
                              np.ones((len(validate), 1)), per_item=True)
        d_loss += float(np.mean(2.0 * delta * (-validate.c_sum - grads_v @ direction)))
    if kind in (OuterLossKind.ACTOR_ONLY, OuterLossKind.ACTOR_PLUS_CRITIC):
        # θ_a' 由更新前的评论家得到，与 λ' 无关
        inputs = _actor_inputs(updated, validate)
        grad_q = grad_params(updated.theta_c, updated.critic_shape, inputs,
                             np.ones((len(validate), 1)))
        d_loss += float(-(grad_q @ direction) / len(validate))
    return d_loss * d_lambda


def fd_meta_gradient_oracle(state: ActorCritic, meta: MetaState, batch: Batch,
                            episode_penalty: float, beta: float, config: AgentConfig,
                            kind: OuterLossKind = OuterLossKind.CRITIC_ONLY, h: float = 1e-6) -> float:
    """
    中心差分 [J'(α_λ+h) - J'(α_λ-h)] / 2h，每次都从同一更新前状态完整重放内层更新
    """
    if h <= 0:
        raise ValueError(f"差分步长必须为正: {h}")

    def evaluate(alpha: float) -> float:
        shifted = replace(meta, alpha_lambda=alpha)
        updated, lam_new = inner_update(state, shifted, batch.train, episode_penalty, beta, config)
        return outer_loss(updated, lam_new, batch.validate, kind)

    return (evaluate(meta.alpha_lambda + h) - evaluate(meta.alpha_lambda - h)) / (2.0 * h)


class MetalAgent(RcD4pgAgent):
    """
    MetaL 智能体：内层按 RC-D4PG 更新，外层用验证集上的元梯度调整 α_λ

    α_η = 0 且 α_λ = 0 时与 RC-D4PG 的轨迹逐位一致
    """

    kind = "metal"

    def __init__(self, spec: CmdpSpec, config: AgentConfig, rng: SeedLike = None,
                 lr_meta: float = 0.2, alpha_lambda: float = 0.0,
                 outer_loss_kind: OuterLossKind = OuterLossKind.CRITIC_ONLY):
        super().__init__(spec, config, rng)
        self.logger = logging.getLogger(__name__)
        self.meta = MetaState(alpha_lambda=alpha_lambda, lam=self.state.lam, lr_meta=lr_meta,
                              lr_lagrange_base=config.lr_lagrange)
        self.outer_loss_kind = OuterLossKind(outer_loss_kind)

    @property
    def alpha_lambda(self) -> float:
        return self.meta.alpha_lambda

    @property
    def scaled_lr(self) -> float:
        return self.meta.effective_lr

    def learn(self, batch: Batch, episode_penalty: float) -> Dict[str, Any]:
        beta = self.config.threshold_beta
        meta = replace(self.meta, lam=self.state.lam)
        updated, lam_new = inner_update(self.state, meta, batch.train, episode_penalty, beta,
                                        self.config)

        info: Dict[str, Any] = {"lambda": lam_new, "J_C": episode_penalty}
        alpha = meta.alpha_lambda
        if len(batch.validate) > 0:
            info["outer_loss"] = outer_loss(updated, lam_new, batch.validate, self.outer_loss_kind)
            if meta.lr_meta != 0.0:
                grad = metal_meta_gradient(self.state, meta, lam_new, updated, batch.train,
                                           batch.validate, episode_penalty, beta, self.config,
                                           self.outer_loss_kind)
                alpha = alpha - meta.lr_meta * grad
                info["meta_gradient"] = grad

        self.meta = replace(meta, alpha_lambda=alpha, lam=lam_new)
        updated = replace(updated, step_counter=self.state.step_counter + 1)
        self.state = target_sync(updated, self.config.target_update_period)

        info["alpha_lambda"] = self.meta.alpha_lambda
        info["scaled_lr"] = self.meta.effective_lr
        self.last_info = info
        self.logger.debug(
            f"MetaL 迭代 {self.state.step_counter}: λ={lam_new:.6f}, α_λ={alpha:.6f}, "
            f"α₁·exp(α_λ)={self.meta.effective_lr:.6g}, J_C={episode_penalty:.4f}, "
            f"outer_loss={info.get('outer_loss', float('nan')):.6f}")
        return info
