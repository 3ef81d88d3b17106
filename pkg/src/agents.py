"""
确定性 actor-critic 智能体
D4PG-lite（非分布式评论家）、固定 λ 奖励塑形 (RS) 与硬约束 RC-D4PG
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .approximators import (Activation, MlpShape, ParamVector, forward, grad_input,
                            grad_params, init_params)
from .environments import CmdpSpec
from .replay import Batch, SeedLike, TransitionBatch


@dataclass
class AgentConfig:
    """智能体超参数，默认值取自 D4PG 各变体的公共设置（批量按桌面规模缩小）"""
    gamma: float = 0.99
    n_step: int = 5
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_lagrange: float = 1e-3
    target_update_period: int = 100
    exploration_sigma: float = 0.1
    batch_size: int = 64
    fixed_lambda: float = 0.0
    threshold_beta: float = 0.1
    split_fraction: float = 0.75
    warmup: int = 1000
    learner_period: int = 4
    replay_capacity: int = 50000
    penalty_capacity: int = 100
    actor_hidden: Tuple[int, ...] = (64, 64)
    critic_hidden: Tuple[int, ...] = (64, 64)
    hidden_activation: str = "elu"
    layer_norm: bool = False

    def validate(self) -> List[str]:
        """
        校验配置

        Returns:
            List[str]: 警告信息（合法但有风险的取值）

        Raises:
            ValueError: 非法取值
        """
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma 必须在 (0, 1) 内: {self.gamma}")
        for name in ("lr_actor", "lr_critic", "lr_lagrange"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} 必须为正数: {getattr(self, name)}")
        if (self.n_step < 1 or self.target_update_period < 1 or self.learner_period < 1
                or self.batch_size < 2):
            raise ValueError("n_step / target_update_period / learner_period 必须 >= 1，batch_size 必须 >= 2")
        if self.exploration_sigma < 0 or self.fixed_lambda < 0 or self.threshold_beta < 0:
            raise ValueError("exploration_sigma / fixed_lambda / threshold_beta 必须 >= 0")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction 必须在 (0, 1) 内: {self.split_fraction}")
        if self.warmup < self.batch_size:
            raise ValueError(f"warmup ({self.warmup}) 不能小于 batch_size ({self.batch_size})")

        warnings = []
        if not (self.lr_lagrange < self.lr_actor <= self.lr_critic):
            warnings.append(
                f"学习率顺序建议 α₁ < α_θa ≤ α_θc，当前 {self.lr_lagrange} / {self.lr_actor} / {self.lr_critic}")
        return warnings


@dataclass(frozen=True)
class ActorCritic:
    """学习器状态：在线网络、目标网络、拉格朗日乘子与步数计数"""
    actor_shape: MlpShape
    critic_shape: MlpShape
    theta_a: ParamVector
    theta_c: ParamVector
    theta_a_target: ParamVector
    theta_c_target: ParamVector
    lam: float = 0.0
    step_counter: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"拉格朗日乘子必须 >= 0: {self.lam}")
        if not (self.theta_a.same_layout(self.theta_a_target)
                and self.theta_c.same_layout(self.theta_c_target)):
            raise ValueError("目标网络布局必须与在线网络一致")


def actor_shape_for(spec: CmdpSpec, config: AgentConfig) -> MlpShape:
    """actor：tanh 输出按动作边界幅度缩放"""
    bound = float(np.max(np.abs(np.concatenate([spec.low, spec.high]))))
    return MlpShape(spec.obs_dim, tuple(config.actor_hidden), spec.act_dim,
                    hidden_activation=config.hidden_activation,
                    output_activation=Activation.SCALED_TANH, output_scale=bound,
                    layer_norm=config.layer_norm)


def critic_shape_for(spec: CmdpSpec, config: AgentConfig) -> MlpShape:
    return MlpShape(spec.obs_dim + spec.act_dim, tuple(config.critic_hidden), 1,
                    hidden_activation=config.hidden_activation,
                    output_activation=Activation.IDENTITY, layer_norm=config.layer_norm)


def build_actor_critic(spec: CmdpSpec, config: AgentConfig, rng: SeedLike = None,
                       lam: float = 0.0) -> ActorCritic:
    rng = np.random.default_rng(rng)
    a_shape = actor_shape_for(spec, config)
    c_shape = critic_shape_for(spec, config)
    theta_a = init_params(a_shape, rng)
    theta_c = init_params(c_shape, rng)
    return ActorCritic(a_shape, c_shape, theta_a, theta_c, theta_a.copy(), theta_c.copy(), lam=lam)


def act(theta_a: ParamVector, actor_shape: MlpShape, obs: np.ndarray, explore: bool,
        sigma: float, rng_seed: SeedLike, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """
    a = π(obs) + N(0, σ²)（仅在探索时），裁剪到动作边界
    """
    action = forward(theta_a, actor_shape, obs)
    if explore and sigma > 0:
        rng = np.random.default_rng(rng_seed)
        action = action + rng.normal(0.0, sigma, size=action.shape)
    return np.clip(action, low, high)


def target_values(state: ActorCritic, batch: TransitionBatch) -> np.ndarray:
    """Q_T(s_next, π_T(s_next))"""
    next_actions = forward(state.theta_a_target, state.actor_shape, batch.s_next)
    inputs = np.concatenate([batch.s_next, next_actions], axis=1)
    return forward(state.theta_c_target, state.critic_shape, inputs)[:, 0]


def td_errors(theta_c: ParamVector, critic_shape: MlpShape, batch: TransitionBatch,
              target_q: np.ndarray, lam: float) -> np.ndarray:
    """δ = r_sum - λ·c_sum + discount_prod·Q_T - Q(s, a)"""
    q = forward(theta_c, critic_shape, batch.critic_inputs)[:, 0]
    return batch.shaped_returns(lam) + batch.discount_prod * target_q - q


def critic_loss(theta_c: ParamVector, critic_shape: MlpShape, batch: TransitionBatch,
                target_q: np.ndarray, lam: float) -> Tuple[float, np.ndarray]:
    """
    奖励塑形后的评论家损失

    Returns:
        (批量平均的 δ², 逐条 δ)
    """
    if lam < 0:
        raise ValueError(f"拉格朗日乘子必须 >= 0: {lam}")
    delta = td_errors(theta_c, critic_shape, batch, target_q, lam)
    return float(np.mean(delta ** 2)), delta


def critic_step(theta_c: ParamVector, critic_shape: MlpShape, batch: TransitionBatch,
                target_q: np.ndarray, lam: float, lr: float,
                delta: Optional[np.ndarray] = None) -> ParamVector:
    """
    θ_c' = θ_c + (2·lr/|B|)·Σ δᵢ·∇_θc Q(sᵢ, aᵢ)

    delta 可传入同一 (θ_c, λ) 下已算好的 TD 误差，省去一次前向
    """
    if delta is None:
        delta = td_errors(theta_c, critic_shape, batch, target_q, lam)
    grad = grad_params(theta_c, critic_shape, batch.critic_inputs, delta[:, None])
    return theta_c.axpy(2.0 * lr / len(batch), grad)


def action_gradients(theta_c: ParamVector, critic_shape: MlpShape, states: np.ndarray,
                     actions: np.ndarray) -> np.ndarray:
    """∇_a Q(s, a)，逐条"""
    inputs = np.concatenate([states, actions], axis=1)
    d_in = grad_input(theta_c, critic_shape, inputs, np.ones((inputs.shape[0], 1)))
    return d_in[:, states.shape[1]:]


def actor_step(theta_a: ParamVector, actor_shape: MlpShape, theta_c: ParamVector,
               critic_shape: MlpShape, batch: TransitionBatch, lr: float) -> ParamVector:
    """
    确定性策略梯度上升

    θ_a' = θ_a + (lr/|B|)·Σ (∂π/∂θ_a)ᵀ·∇_a Q(sᵢ, π(sᵢ))，评论家参数不参与更新
    """
    actions = forward(theta_a, actor_shape, batch.s)
    dq_da = action_gradients(theta_c, critic_shape, batch.s, actions)
    grad = grad_params(theta_a, actor_shape, batch.s, dq_da)
    return theta_a.axpy(lr / len(batch), grad)


def target_sync(state: ActorCritic, period: int) -> ActorCritic:
    """每 period 个学习步把在线网络硬拷贝到目标网络"""
    if state.step_counter > 0 and state.step_counter % period == 0:
        return replace(state, theta_a_target=state.theta_a.copy(),
                       theta_c_target=state.theta_c.copy())
    return state


def lagrange_step_rc(lam: float, episode_penalty: float, beta: float, lr: float) -> float:
    """λ' = max(0, λ - α₁·(β - J_C))：违反约束时 λ 增大"""
    if lam < 0:
        raise ValueError(f"拉格朗日乘子必须 >= 0: {lam}")
    return max(0.0, lam - lr * (beta - episode_penalty))


class ActorCriticAgent:
    """
    D4PG-lite 智能体（λ ≡ 0）

    所有智能体只用 batch.train 做参数更新，验证集留给元梯度
    """

    kind = "d4pg"

    def __init__(self, spec: CmdpSpec, config: AgentConfig, rng: SeedLike = None,
                 initial_lambda: float = 0.0):
        self.spec = spec
        self.config = config
        self.state = build_actor_critic(spec, config, rng, lam=initial_lambda)
        self.logger = logging.getLogger(__name__)
        self.last_info: Dict[str, Any] = {}

    @property
    def lam(self) -> float:
        return self.state.lam

    @property
    def alpha_lambda(self) -> float:
        return 0.0

    @property
    def scaled_lr(self) -> float:
        return self.config.lr_lagrange

    def policy_snapshot(self) -> ParamVector:
        """只读 actor 快照（参数向量不可变，直接共享）"""
        return self.state.theta_a

    def act(self, obs: np.ndarray, explore: bool = True, rng: SeedLike = None,
            theta_a: Optional[ParamVector] = None) -> np.ndarray:
        params = self.state.theta_a if theta_a is None else theta_a
        return act(params, self.state.actor_shape, obs, explore, self.config.exploration_sigma,
                   rng, self.spec.low, self.spec.high)

    def lagrange_update(self, episode_penalty: float) -> float:
        return 0.0

    def learn(self, batch: Batch, episode_penalty: float) -> Dict[str, Any]:
        """
        一次学习器迭代：先更新 λ，再在训练集上并行更新评论家与 actor

        Args:
            batch: 采样得到的训练/验证划分
            episode_penalty: 本次从惩罚缓冲区抽到的 J_C

        Returns:
            Dict[str, Any]: 本次迭代遥测
        """
        lam_new = self.lagrange_update(episode_penalty)
        state = self.state
        train = batch.train
        target_q = target_values(state, train)
        loss, delta = critic_loss(state.theta_c, state.critic_shape, train, target_q, lam_new)
        theta_c = critic_step(state.theta_c, state.critic_shape, train, target_q, lam_new,
                              self.config.lr_critic, delta=delta)
        theta_a = actor_step(state.theta_a, state.actor_shape, state.theta_c, state.critic_shape,
                             train, self.config.lr_actor)
        state = replace(state, theta_a=theta_a, theta_c=theta_c, lam=lam_new,
                        step_counter=state.step_counter + 1)
        self.state = target_sync(state, self.config.target_update_period)
        self.last_info = {"lambda": lam_new, "J_C": episode_penalty, "critic_loss": loss}
        return self.last_info


class RcD4pgAgent(ActorCriticAgent):
    """RC-D4PG：每次迭代用一个抽样回合惩罚做投影梯度更新 λ"""

    kind = "rc"

    def __init__(self, spec: CmdpSpec, config: AgentConfig, rng: SeedLike = None,
                 initial_lambda: float = 0.0, lagrange_enabled: bool = True):
        super().__init__(spec, config, rng, initial_lambda=initial_lambda)
        self.lagrange_enabled = lagrange_enabled

    def lagrange_update(self, episode_penalty: float) -> float:
        if not self.lagrange_enabled:
            return self.state.lam
        return lagrange_step_rc(self.state.lam, episode_penalty, self.config.threshold_beta,
                                self.config.lr_lagrange)


class RewardShapingAgent(RcD4pgAgent):
    """固定 λ̄ 的奖励塑形：关闭拉格朗日更新的 RC-D4PG"""

    kind = "rs"

    def __init__(self, spec: CmdpSpec, config: AgentConfig, rng: SeedLike = None):
        super().__init__(spec, config, rng, initial_lambda=config.fixed_lambda,
                         lagrange_enabled=False)
