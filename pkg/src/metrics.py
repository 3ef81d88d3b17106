"""
评估指标模块
超限量、惩罚回报、收敛均值与运行汇总
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Iterable, List, Sequence

import numpy as np
import pandas as pd


DEFAULT_WINDOW = 100
SUMMARY_COLUMNS = ["agent", "env", "seed", "safety_coeff", "beta", "kappa",
                   "R", "J_C", "overshoot", "R_penalized"]

logger = logging.getLogger(__name__)


class InsufficientTelemetryError(ValueError):
    """遥测回合数少于收敛窗口"""


def overshoot(j_c: float, beta: float) -> float:
    """ψ = max(0, J_C - β)"""
    if j_c < 0 or beta < 0:
        raise ValueError(f"J_C 与 β 必须 >= 0: {j_c}, {beta}")
    return max(0.0, j_c - beta)


def penalized_return(ret: float, psi: float, kappa: float) -> float:
    """R - κ·ψ"""
    if psi < 0 or kappa < 0:
        raise ValueError(f"ψ 与 κ 必须 >= 0: {psi}, {kappa}")
    return ret - kappa * psi


@dataclass(frozen=True)
class RunSummary:
    """单次运行（一个种子）的收敛汇总，对应 CSV 中的一行"""
    agent: str
    env: str
    seed: int
    safety_coeff: float
    beta: float
    kappa: float
    R: float
    J_C: float
    overshoot: float
    R_penalized: float

    def to_row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row) -> "RunSummary":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for name in SUMMARY_COLUMNS:
            raw = row[name]
            if kinds[name] in (int, "int"):
                values[name] = int(raw)
            elif kinds[name] in (float, "float"):
                values[name] = float(raw)
            else:
                values[name] = str(raw)
        return cls(**values)


def summarize(telemetry: pd.DataFrame, window: int = DEFAULT_WINDOW, kappa: float = 200.0,
              beta: float = 0.1, agent: str = "", env: str = "", seed: int = 0,
              safety_coeff: float = 0.0) -> RunSummary:
    """
    用最后 window 个回合的均值计算 R 与 J_C，再逐次运行算 ψ 与 R_penalized

    Args:
        telemetry: 每回合一行，至少含 return 与 episode_penalty 两列
        window: 收敛窗口 W
        kappa: 惩罚权重 κ
        beta: 约束阈值

    Returns:
        RunSummary: 运行汇总

    Raises:
        InsufficientTelemetryError: 回合数少于 window
    """
    if window < 1:
        raise ValueError(f"收敛窗口必须 >= 1: {window}")
    if len(telemetry) < window:
        raise InsufficientTelemetryError(f"遥测只有 {len(telemetry)} 个回合，少于窗口 {window}")
    tail = telemetry.tail(window)
    ret = float(tail["return"].mean())
    j_c = float(tail["episode_penalty"].mean())
    psi = overshoot(j_c, beta)
    return RunSummary(agent=agent, env=env, seed=int(seed), safety_coeff=float(safety_coeff),
                      beta=float(beta), kappa=float(kappa), R=ret, J_C=j_c, overshoot=psi,
                      R_penalized=penalized_return(ret, psi, kappa))


def summaries_frame(summaries: Iterable[RunSummary]) -> pd.DataFrame:
    return pd.DataFrame([s.to_row() for s in summaries], columns=SUMMARY_COLUMNS)


def _mean_stderr(values: pd.Series) -> str:
    n = len(values)
    stderr = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return f"{float(values.mean()):.6g}±{stderr:.6g}"


def aggregate_summaries(summaries: Sequence[RunSummary]) -> pd.DataFrame:
    """
    每个智能体一行聚合：数值列写成 mean±stderr

    先按运行算 R_penalized 再求平均，顺序固定
    """
    frame = summaries_frame(summaries)
    if frame.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    rows: List[dict] = []
    for agent, group in frame.groupby("agent", sort=False):
        row = {"agent": agent, "env": "*", "seed": "*"}
        for column in SUMMARY_COLUMNS[3:]:
            row[column] = _mean_stderr(group[column])
        rows.append(row)
        logger.debug(f"聚合 {agent}: {len(group)} 次运行")
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
