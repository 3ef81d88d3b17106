"""
约束 MDP 玩具环境
确定性的 PointMass1D 与 LqrConstrained，带安全系数旋钮以复现可解/不可解约束区间
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np


V_MAX = 1.0
X_LIMIT = 2.0
DT = 0.1
START_JITTER = 0.05


class EpisodeFinishedError(RuntimeError):
    """回合已结束（或尚未 reset）时调用 step"""


@dataclass(frozen=True)
class CmdpSpec:
    """环境维度与动作边界"""
    obs_dim: int
    act_dim: int
    episode_len: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1 or self.episode_len < 1:
            raise ValueError(f"环境维度和回合长度必须 >= 1: {self}")
        if len(self.action_low) != self.act_dim or len(self.action_high) != self.act_dim:
            raise ValueError("动作边界长度必须等于 act_dim")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError(f"动作下界必须逐维小于上界: {self.action_low} / {self.action_high}")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)


@dataclass(frozen=True)
class SafetyConfig:
    """安全系数与约束阈值 β"""
    safety_coefficient: float = 0.3
    threshold_beta: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.safety_coefficient <= 1.0:
            raise ValueError(f"安全系数必须在 (0, 1] 内: {self.safety_coefficient}")
        if self.threshold_beta < 0.0:
            raise ValueError(f"约束阈值必须 >= 0: {self.threshold_beta}")


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: float
    penalty: float
    done: bool


class ConstrainedEnv(ABC):
    """
    约束 MDP 环境基类

    状态为 (x, v) 的一维双积分器，速度超过 safety_coefficient·v_max 时给出惩罚 1
    """

    name = "base"

    def __init__(self, safety: Optional[SafetyConfig] = None, episode_len: int = 200):
        self.safety = safety or SafetyConfig()
        self._spec = CmdpSpec(obs_dim=2, act_dim=1, episode_len=int(episode_len),
                              action_low=(-1.0,), action_high=(1.0,))
        self.state: Optional[np.ndarray] = None
        self.t = 0
        self.done = True
        self.logger = logging.getLogger(__name__)

    def spec(self) -> CmdpSpec:
        return self._spec

    @abstractmethod
    def start_position(self) -> float:
        """未扰动的起始位置"""

    @abstractmethod
    def reward(self, x_next: float, action: float) -> float:
        """即时奖励，取值 [0, 1]"""

    def reset(self, seed: int = 0) -> np.ndarray:
        """
        按种子确定性地重置环境

        种子 0 为标准起点；其它种子在 x 上加 U[-0.05, 0.05] 的偏移
        """
        if seed == 0:
            offset = 0.0
        else:
            offset = float(np.random.default_rng(seed).uniform(-START_JITTER, START_JITTER))
        self.state = np.array([self.start_position() + offset, 0.0])
        self.t = 0
        self.done = False
        return self.state.copy()

    def set_state(self, x: float, v: float):
        """直接设置状态（手算实例与分析用）"""
        if self.state is None:
            self.reset(0)
        self.state = np.array([float(x), float(v)])

    def is_violation(self, v_next: float) -> bool:
        return abs(v_next) > self.safety.safety_coefficient * V_MAX

    def step(self, action) -> StepResult:
        if self.state is None or self.done:
            raise EpisodeFinishedError("回合已结束或尚未 reset，不能继续 step")

        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self._spec.act_dim),
                    self._spec.low, self._spec.high)
        x, v = self.state
        v_next = float(np.clip(v + DT * a[0], -V_MAX, V_MAX))
        x_next = float(np.clip(x + DT * v_next, -X_LIMIT, X_LIMIT))

        reward = self.reward(x_next, float(a[0]))
        penalty = 1.0 if self.is_violation(v_next) else 0.0

        self.state = np.array([x_next, v_next])
        self.t += 1
        self.done = self.t >= self._spec.episode_len
        return StepResult(obs=self.state.copy(), reward=reward, penalty=penalty, done=self.done)


class PointMass1D(ConstrainedEnv):
    """从 x=-1 出发到达 x=1，速度受限"""

    name = "pointmass1d"

    def start_position(self) -> float:
        return -1.0

    def reward(self, x_next: float, action: float) -> float:
        return max(0.0, 1.0 - abs(x_next - 1.0))


class LqrConstrained(ConstrainedEnv):
    """二次型奖励 1 - min(1, x² + 0.1u²)，从 x=1 出发回到原点，同样的速度约束"""

    name = "lqr"

    def start_position(self) -> float:
        return 1.0

    def reward(self, x_next: float, action: float) -> float:
        return 1.0 - min(1.0, x_next ** 2 + 0.1 * action ** 2)


ENVIRONMENTS = {
    PointMass1D.name: PointMass1D,
    LqrConstrained.name: LqrConstrained,
}


def make_env(name: str, safety: Optional[SafetyConfig] = None, episode_len: int = 200) -> ConstrainedEnv:
    """
    按名称创建环境

    Args:
        name: "pointmass1d" 或 "lqr"
        safety: 安全配置
        episode_len: 回合长度

    Returns:
        ConstrainedEnv: 环境实例
    """
    key = name.lower()
    if key not in ENVIRONMENTS:
        raise ValueError(f"未知环境: {name}，可选 {sorted(ENVIRONMENTS)}")
    return ENVIRONMENTS[key](safety=safety, episode_len=episode_len)


def rollout(env: ConstrainedEnv, policy: Callable[[np.ndarray], np.ndarray],
            seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    以给定策略跑完一个回合

    Returns:
        (逐步奖励, 逐步惩罚)
    """
    obs = env.reset(seed)
    rewards, penalties = [], []
    done = False
    while not done:
        result = env.step(policy(obs))
        rewards.append(result.reward)
        penalties.append(result.penalty)
        obs, done = result.obs, result.done
    return np.asarray(rewards), np.asarray(penalties)


def constant_action_rollout(env: ConstrainedEnv, action: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    return rollout(env, lambda obs: np.array([action]), seed)


def velocity_tracking_policy(cruise_speed: float = 0.25, goal: float = 1.0,
                             gain: float = 10.0) -> Callable[[np.ndarray], np.ndarray]:
    """
    匀速巡航再制动的手写慢策略

    加速度单步改变速度 0.1·a，因此 cruise_speed 之下的目标速度永远不会越过约束
    """
    def policy(obs: np.ndarray) -> np.ndarray:
        x, v = obs
        distance = goal - x
        # 剩余距离不足以在当前速度下减速时，目标速度按距离收缩
        target = float(np.clip(np.sign(distance) * min(cruise_speed, np.sqrt(2 * DT * abs(distance)) * 0.9),
                               -cruise_speed, cruise_speed))
        return np.array([np.clip(gain * (target - v), -1.0, 1.0)])
    return policy
