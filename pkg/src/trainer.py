"""
训练运行器
负责实验配置、智能体构建，以及交替执行回合采样与学习器迭代
"""

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .agents import ActorCriticAgent, AgentConfig, RcD4pgAgent, RewardShapingAgent
from .approximators import save_checkpoint
from .environments import SafetyConfig, make_env
from .mesh import MeshAgent, MeshConfig
from .metal import MetalAgent, OuterLossKind
from .metrics import RunSummary, summarize
from .replay import EpisodePenalty, NStepAccumulator, PenaltyBuffer, ReplayBuffer


AGENT_KINDS = ("d4pg", "rs", "rc", "metal", "mesh")
TELEMETRY_COLUMNS = ["episode", "return", "episode_penalty", "lambda", "alpha_lambda", "scaled_lr"]


def parse_agent_label(label: str) -> Tuple[str, Optional[float]]:
    """
    解析智能体标签

    "rs-10.0" 表示固定 λ̄=10 的奖励塑形，其余标签即智能体类型

    Returns:
        (智能体类型, rs 的固定 λ̄ 或 None)
    """
    kind, _, suffix = label.strip().lower().partition("-")
    if kind not in AGENT_KINDS:
        raise ValueError(f"未知智能体: {label}，可选 {list(AGENT_KINDS)}")
    if suffix:
        if kind != "rs":
            raise ValueError(f"只有 rs 智能体可以带 λ̄ 后缀: {label}")
        return kind, float(suffix)
    return kind, None


@dataclass
class ExperimentConfig:
    """单组实验配置（可包含多个种子）"""
    agent: str = "rc"
    env: str = "pointmass1d"
    episode_len: int = 200
    safety_coefficient: float = 0.3
    threshold_beta: float = 0.1
    seeds: Tuple[int, ...] = (0,)
    episodes: int = 600
    window: int = 100
    kappa: float = 200.0
    rs_lambda: float = 1.0
    output_dir: str = "results"
    save_checkpoints: bool = False
    progress_every: int = 50
    outer_loss_kind: str = OuterLossKind.CRITIC_ONLY.value
    lr_meta: float = 0.2
    alpha_lambda: float = 0.0
    agent_config: AgentConfig = field(default_factory=AgentConfig)
    mesh_config: MeshConfig = field(default_factory=MeshConfig)

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "ExperimentConfig":
        """由 ConfigLoader 的嵌套字典构造"""
        experiment, env, metal = config["experiment"], config["env"], config["metal"]
        agent_values = dict(config["agent"])
        agent_values["actor_hidden"] = tuple(agent_values["actor_hidden"])
        agent_values["critic_hidden"] = tuple(agent_values["critic_hidden"])
        mesh_values = dict(config["mesh"])
        mesh_values["meta_hidden"] = tuple(mesh_values["meta_hidden"])
        return cls(
            agent=experiment["agent"],
            env=env["name"],
            episode_len=env["episode_len"],
            safety_coefficient=env["safety_coefficient"],
            threshold_beta=env["threshold_beta"],
            seeds=tuple(int(s) for s in experiment["seeds"]),
            episodes=experiment["episodes"],
            window=experiment["window"],
            kappa=experiment["kappa"],
            rs_lambda=experiment["rs_lambda"],
            output_dir=experiment["output_dir"],
            save_checkpoints=experiment["save_checkpoints"],
            progress_every=config["logging"]["progress_every"],
            outer_loss_kind=metal["outer_loss_kind"],
            lr_meta=metal["lr_meta"],
            alpha_lambda=metal["alpha_lambda"],
            agent_config=AgentConfig(**agent_values),
            mesh_config=MeshConfig(**mesh_values),
        )

    def validate(self) -> List[str]:
        """
        校验实验配置

        Returns:
            List[str]: 风险警告

        Raises:
            ValueError: 非法取值
        """
        kind, suffix = parse_agent_label(self.agent)
        SafetyConfig(self.safety_coefficient, self.threshold_beta)
        make_env(self.env, episode_len=self.episode_len)
        if not self.seeds:
            raise ValueError("种子列表不能为空")
        if any(int(s) < 0 for s in self.seeds):
            raise ValueError(f"种子必须是非负整数: {self.seeds}")
        if self.episodes < 1 or self.window < 1:
            raise ValueError("episodes 与 window 必须 >= 1")
        if self.kappa < 0 or self.rs_lambda < 0:
            raise ValueError("kappa 与 rs_lambda 必须 >= 0")
        if self.lr_meta < 0:
            raise ValueError(f"lr_meta 不能为负: {self.lr_meta}")
        OuterLossKind(self.outer_loss_kind)
        self.mesh_config.validate()

        warnings = self.resolved_agent_config().validate()
        if self.episodes < self.window:
            warnings.append(f"回合数 {self.episodes} 少于收敛窗口 {self.window}，汇总时窗口将收缩")
        if self.kappa != self.episode_len:
            warnings.append(f"kappa={self.kappa} 与回合长度 {self.episode_len} 不一致，回报与超限不再等权")
        if self.agent_config.batch_size > self.agent_config.warmup:
            warnings.append("batch_size 大于 warmup")
        return warnings

    @property
    def kind(self) -> str:
        return parse_agent_label(self.agent)[0]

    def resolved_agent_config(self) -> AgentConfig:
        """把阈值和 rs 的 λ̄ 写进智能体配置"""
        _, suffix = parse_agent_label(self.agent)
        rs_lambda = self.rs_lambda if suffix is None else suffix
        return replace(self.agent_config, threshold_beta=self.threshold_beta, fixed_lambda=rs_lambda)

    @property
    def effective_window(self) -> int:
        return min(self.window, self.episodes)


def make_agent(config: ExperimentConfig, spec, rng) -> ActorCriticAgent:
    """按实验配置构建智能体"""
    kind = config.kind
    agent_config = config.resolved_agent_config()
    if kind == "d4pg":
        return ActorCriticAgent(spec, agent_config, rng)
    if kind == "rs":
        return RewardShapingAgent(spec, agent_config, rng)
    if kind == "rc":
        return RcD4pgAgent(spec, agent_config, rng)
    if kind == "metal":
        return MetalAgent(spec, agent_config, rng, lr_meta=config.lr_meta,
                          alpha_lambda=config.alpha_lambda,
                          outer_loss_kind=OuterLossKind(config.outer_loss_kind))
    return MeshAgent(spec, agent_config, rng, mesh_config=config.mesh_config)


def run_label(config: ExperimentConfig, seed: int) -> str:
    return (f"{config.agent}_{config.env}_s{config.safety_coefficient:g}"
            f"_b{config.threshold_beta:g}_seed{seed}")


class TrainingRunner:
    """
    单种子训练运行器

    每个回合开始时固定 actor 快照用于采样；预热结束后每 learner_period 个环境步学习器迭代一次
    """

    def __init__(self, config: ExperimentConfig, seed: int):
        """
        初始化运行器

        Args:
            config: 实验配置
            seed: 随机种子（决定全部随机性）
        """
        self.config = config
        self.seed = int(seed)
        self.agent_config = config.resolved_agent_config()
        self.env = make_env(config.env, SafetyConfig(config.safety_coefficient, config.threshold_beta),
                            config.episode_len)
        init_seq, explore_seq, sample_seq = np.random.SeedSequence(self.seed).spawn(3)
        self.explore_rng = np.random.default_rng(explore_seq)
        self.sample_rng = np.random.default_rng(sample_seq)
        self.agent = make_agent(config, self.env.spec(), np.random.default_rng(init_seq))

        self.replay = ReplayBuffer(self.agent_config.replay_capacity)
        self.penalties = PenaltyBuffer(self.agent_config.penalty_capacity)
        self.accumulator = NStepAccumulator(self.agent_config.n_step, self.agent_config.gamma)

        self.total_steps = 0
        self.learn_steps = 0
        self.rows: List[Dict[str, Any]] = []
        self.logger = logging.getLogger(__name__)

    def episode_start_seed(self, episode: int) -> int:
        # 种子 0 的第 0 回合为标准起点
        return self.seed * 1_000_003 + episode

    def learner_ready(self) -> bool:
        return len(self.replay) >= self.agent_config.warmup and len(self.penalties) > 0

    def run_episode(self, episode: int) -> Dict[str, Any]:
        """跑一个回合并在其间交替学习，返回该回合的遥测行"""
        snapshot = self.agent.policy_snapshot()
        obs = self.env.reset(self.episode_start_seed(episode))
        self.accumulator.reset()
        episode_return = 0.0
        penalties: List[float] = []
        done = False
        while not done:
            action = self.agent.act(obs, explore=True, rng=self.explore_rng, theta_a=snapshot)
            result = self.env.step(action)
            for transition in self.accumulator.push(obs, action, result.reward, result.penalty,
                                                    result.obs, result.done):
                self.replay.push_transition(transition)
            episode_return += result.reward
            penalties.append(result.penalty)
            obs, done = result.obs, result.done
            self.total_steps += 1

            if self.learner_ready() and self.total_steps % self.agent_config.learner_period == 0:
                batch = self.replay.sample_batch(self.agent_config.batch_size,
                                                 self.agent_config.split_fraction, self.sample_rng)
                sampled_penalty = self.penalties.sample_penalty(self.sample_rng)
                self.agent.learn(batch, sampled_penalty)
                self.learn_steps += 1

        penalty = EpisodePenalty.from_penalties(penalties)
        self.penalties.push_episode_penalty(penalty)
        return {
            "episode": episode,
            "return": episode_return,
            "episode_penalty": penalty.value,
            "lambda": float(self.agent.lam),
            "alpha_lambda": float(self.agent.alpha_lambda),
            "scaled_lr": float(self.agent.scaled_lr),
        }

    def telemetry(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TELEMETRY_COLUMNS)

    def run(self) -> Tuple[pd.DataFrame, RunSummary]:
        """
        完整训练

        Returns:
            (逐回合遥测, 运行汇总)
        """
        start = time.time()
        self.logger.info(f"开始训练 {run_label(self.config, self.seed)}，共 {self.config.episodes} 个回合")
        for episode in range(self.config.episodes):
            row = self.run_episode(episode)
            self.rows.append(row)
            if self.config.progress_every and (episode + 1) % self.config.progress_every == 0:
                self.logger.info(
                    f"[{self.config.agent} seed={self.seed}] 回合 {episode + 1}/{self.config.episodes}: "
                    f"回报 {row['return']:.2f}, J_C {row['episode_penalty']:.3f}, λ {row['lambda']:.4f}, "
                    f"学习步 {self.learn_steps}")

        frame = self.telemetry()
        summary = summarize(frame, self.config.effective_window, self.config.kappa,
                            self.config.threshold_beta, agent=self.config.agent, env=self.config.env,
                            seed=self.seed, safety_coeff=self.config.safety_coefficient)
        self.logger.info(
            f"训练完成 {run_label(self.config, self.seed)}，用时 {time.time() - start:.1f}秒: "
            f"R={summary.R:.2f}, J_C={summary.J_C:.4f}, ψ={summary.overshoot:.4f}, "
            f"R_penalized={summary.R_penalized:.2f}")
        return frame, summary

    def write_outputs(self, frame: pd.DataFrame) -> Path:
        """写出遥测 CSV（可选同时保存最终 actor 检查点）"""
        out_dir = Path(self.config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        label = run_label(self.config, self.seed)
        path = out_dir / f"telemetry_{label}.csv"
        frame.to_csv(path, index=False)
        if self.config.save_checkpoints:
            save_checkpoint(out_dir / f"actor_{label}.ckpt", self.agent.policy_snapshot())
        return path
