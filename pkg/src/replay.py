"""
经验回放模块
保存带逐步惩罚的 n 步转移，以及供拉格朗日乘子更新使用的回合惩罚缓冲区
"""

import logging
import math
import threading
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np


SeedLike = Union[int, np.random.Generator, None]


class InsufficientDataError(ValueError):
    """缓冲区数据不足以完成采样"""


@dataclass(frozen=True)
class Transition:
    """
    一条 n 步转移

    r_sum / c_sum 分开保存，训练时再按 λ 组合成 r_sum - λ·c_sum
    """
    s: np.ndarray
    a: np.ndarray
    r_sum: float
    c_sum: float
    s_next: np.ndarray
    discount_prod: float

    def __post_init__(self):
        if self.r_sum < 0 or self.c_sum < 0:
            raise ValueError(f"r_sum/c_sum 必须非负: {self.r_sum}, {self.c_sum}")
        if not (self.discount_prod == 0.0 or 0.0 < self.discount_prod <= 1.0):
            raise ValueError(f"discount_prod 必须为 0 或在 (0, 1] 内: {self.discount_prod}")

    def shaped_return(self, lam: float) -> float:
        return self.r_sum - lam * self.c_sum


@dataclass(frozen=True)
class EpisodePenalty:
    """一个完整回合的逐步惩罚均值（经验 J_C）"""
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"回合惩罚必须在 [0, 1] 内: {self.value}")

    @classmethod
    def from_penalties(cls, penalties: Sequence[float]) -> "EpisodePenalty":
        if len(penalties) == 0:
            raise ValueError("空回合没有惩罚均值")
        return cls(float(np.mean(penalties)))


@dataclass(frozen=True)
class TransitionBatch:
    """按列存放的一组转移"""
    s: np.ndarray
    a: np.ndarray
    r_sum: np.ndarray
    c_sum: np.ndarray
    s_next: np.ndarray
    discount_prod: np.ndarray

    def __len__(self) -> int:
        return self.r_sum.shape[0]

    @property
    def critic_inputs(self) -> np.ndarray:
        return np.concatenate([self.s, self.a], axis=1)

    def shaped_returns(self, lam: float) -> np.ndarray:
        return self.r_sum - lam * self.c_sum

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        if len(transitions) == 0:
            raise ValueError("不能由空列表构造批量")
        return cls(
            s=np.stack([np.asarray(t.s, dtype=np.float64) for t in transitions]),
            a=np.stack([np.asarray(t.a, dtype=np.float64) for t in transitions]),
            r_sum=np.array([t.r_sum for t in transitions], dtype=np.float64),
            c_sum=np.array([t.c_sum for t in transitions], dtype=np.float64),
            s_next=np.stack([np.asarray(t.s_next, dtype=np.float64) for t in transitions]),
            discount_prod=np.array([t.discount_prod for t in transitions], dtype=np.float64),
        )

    def subset(self, idx: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(self.s[idx], self.a[idx], self.r_sum[idx], self.c_sum[idx],
                               self.s_next[idx], self.discount_prod[idx])


@dataclass(frozen=True)
class Batch:
    """一次采样划分出的训练集与验证集（互不相交）"""
    train: TransitionBatch
    validate: TransitionBatch

    def merged(self) -> TransitionBatch:
        return TransitionBatch(*(np.concatenate([getattr(self.train, f), getattr(self.validate, f)])
                                 for f in ("s", "a", "r_sum", "c_sum", "s_next", "discount_prod")))


class ReplayBuffer:
    """
    先进先出的均匀经验回放

    内部为预分配的环形数组，首次写入时按观测/动作维度分配
    """

    def __init__(self, capacity: int = 50000):
        if capacity < 1:
            raise ValueError(f"回放容量必须 >= 1: {capacity}")
        self.capacity = int(capacity)
        self._size = 0
        self._next = 0
        self._columns: Optional[dict] = None
        self._lock = threading.Lock()
        self.logger = logging.getLogger(__name__)

    def __len__(self) -> int:
        return self._size

    def _allocate(self, t: Transition):
        obs_dim = np.asarray(t.s).size
        act_dim = np.asarray(t.a).size
        self._columns = {
            "s": np.zeros((self.capacity, obs_dim)),
            "a": np.zeros((self.capacity, act_dim)),
            "r_sum": np.zeros(self.capacity),
            "c_sum": np.zeros(self.capacity),
            "s_next": np.zeros((self.capacity, obs_dim)),
            "discount_prod": np.zeros(self.capacity),
        }
        self.logger.debug(f"回放缓冲区已分配: 容量 {self.capacity}, obs_dim={obs_dim}, act_dim={act_dim}")

    def push_transition(self, t: Transition):
        """写入一条转移，满时覆盖最旧的一条"""
        with self._lock:
            if self._columns is None:
                self._allocate(t)
            i = self._next
            cols = self._columns
            cols["s"][i] = t.s
            cols["a"][i] = t.a
            cols["r_sum"][i] = t.r_sum
            cols["c_sum"][i] = t.c_sum
            cols["s_next"][i] = t.s_next
            cols["discount_prod"][i] = t.discount_prod
            self._next = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _ordered_indices(self) -> np.ndarray:
        # 从最旧到最新的物理下标
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def contents(self) -> TransitionBatch:
        """按写入顺序（旧到新）返回全部内容"""
        with self._lock:
            if self._size == 0:
                raise InsufficientDataError("回放缓冲区为空")
            idx = self._ordered_indices()
            return TransitionBatch(**{k: v[idx].copy() for k, v in self._columns.items()})

    def sample_batch(self, n: int, split_fraction: float = 0.75, rng_seed: SeedLike = None) -> Batch:
        """
        无放回均匀采样 n 条并划分训练/验证集

        Args:
            n: 采样数量
            split_fraction: 训练集占比，前 ceil(split_fraction·n) 条为训练集
            rng_seed: 随机种子或生成器

        Returns:
            Batch: 训练集与验证集
        """
        if not 0.0 < split_fraction < 1.0:
            raise ValueError(f"split_fraction 必须在 (0, 1) 内: {split_fraction}")
        with self._lock:
            if n < 1 or self._size < n:
                raise InsufficientDataError(f"回放缓冲区只有 {self._size} 条，无法采样 {n} 条")
            rng = np.random.default_rng(rng_seed)
            picks = rng.choice(self._size, size=n, replace=False)
            # 逻辑下标（旧到新）换算为物理下标
            start = self._next if self._size == self.capacity else 0
            physical = (start + picks) % self.capacity
            data = {k: v[physical].copy() for k, v in self._columns.items()}
        full = TransitionBatch(**data)
        n_train = min(n, math.ceil(split_fraction * n))
        return Batch(train=full.subset(np.arange(n_train)), validate=full.subset(np.arange(n_train, n)))


class PenaltyBuffer:
    """回合惩罚环形缓冲区，默认保存最近 100 个回合"""

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise ValueError(f"惩罚缓冲区容量必须 >= 1: {capacity}")
        self.capacity = int(capacity)
        self._values: Deque[float] = deque(maxlen=self.capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._values)

    def push_episode_penalty(self, p: EpisodePenalty):
        with self._lock:
            self._values.append(float(p.value))

    def values(self) -> List[float]:
        with self._lock:
            return list(self._values)

    def sample_penalty(self, rng_seed: SeedLike = None) -> float:
        """均匀抽取一个回合惩罚"""
        with self._lock:
            if not self._values:
                raise InsufficientDataError("惩罚缓冲区为空")
            rng = np.random.default_rng(rng_seed)
            return self._values[int(rng.integers(len(self._values)))]

    def mean(self) -> float:
        with self._lock:
            if not self._values:
                raise InsufficientDataError("惩罚缓冲区为空")
            return float(np.mean(self._values))


class NStepAccumulator:
    """
    把逐步交互流转换成 n 步转移

    回合在窗口内结束时 discount_prod 记为 0
    """

    def __init__(self, n_step: int, gamma: float):
        if n_step < 1:
            raise ValueError(f"n_step 必须 >= 1: {n_step}")
        self.n_step = int(n_step)
        self.gamma = float(gamma)
        self._window: Deque[Tuple[np.ndarray, np.ndarray, float, float]] = deque()

    def _emit(self, s_next: np.ndarray, terminal: bool) -> Transition:
        r_sum = 0.0
        c_sum = 0.0
        for k, (_, _, r, c) in enumerate(self._window):
            r_sum += self.gamma ** k * r
            c_sum += self.gamma ** k * c
        s, a, _, _ = self._window.popleft()
        discount = 0.0 if terminal else self.gamma ** self.n_step
        return Transition(s=s, a=a, r_sum=r_sum, c_sum=c_sum,
                          s_next=np.array(s_next, dtype=np.float64), discount_prod=discount)

    def push(self, s: np.ndarray, a: np.ndarray, reward: float, penalty: float,
             s_next: np.ndarray, done: bool) -> List[Transition]:
        """
        加入一步交互，返回本步产生的全部 n 步转移

        回合结束时把窗口内剩余的前缀全部以终止转移冲出
        """
        self._window.append((np.array(s, dtype=np.float64), np.array(a, dtype=np.float64),
                             float(reward), float(penalty)))
        out: List[Transition] = []
        if done:
            while self._window:
                out.append(self._emit(s_next, terminal=True))
        elif len(self._window) == self.n_step:
            out.append(self._emit(s_next, terminal=False))
        return out

    def reset(self):
        self._window.clear()
