"""
实验主程序
整合配置、训练运行器、参数扫描、梯度校验与绘图数据输出
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from concurrent_log_handler import ConcurrentRotatingFileHandler
from pythonjsonlogger import jsonlogger

from .config_loader import ConfigLoader
from .gradcheck import GradcheckReport, run_suite
from .metrics import RunSummary, aggregate_summaries, summaries_frame
from .trainer import TELEMETRY_COLUMNS, ExperimentConfig, TrainingRunner, parse_agent_label


LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
PLOT_COLUMNS = ["episode", "return", "J_C_running", "lambda", "alpha_lambda", "scaled_lr"]


class TelemetryError(ValueError):
    """遥测文件缺失或损坏"""


def setup_logging(level: str = "INFO", log_file: str = "logs/lab.log", fmt: str = "text",
                  max_bytes: int = 10485760, backup_count: int = 5):
    """设置日志配置：多进程安全的滚动文件 + 控制台"""
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    formatter = jsonlogger.JsonFormatter(LOG_FORMAT) if fmt == "json" else logging.Formatter(LOG_FORMAT)
    file_handler = ConcurrentRotatingFileHandler(log_file, "a", maxBytes=max_bytes,
                                                 backupCount=backup_count, encoding="utf-8")
    stream_handler = logging.StreamHandler()
    for handler in (file_handler, stream_handler):
        handler.setFormatter(formatter)
    logging.basicConfig(level=getattr(logging, level.upper()), handlers=[file_handler, stream_handler],
                        force=True)


def logging_args(config: Dict[str, Any]) -> Tuple[str, str, str, int, int]:
    section = config["logging"]
    return (section["level"], section["file"], section["format"], section["max_bytes"],
            section["backup_count"])


@dataclass(frozen=True)
class SweepGrid:
    """扫描网格：智能体 × 安全系数 × 阈值 × α₁ × 种子"""
    agents: Tuple[str, ...]
    safety_coefficients: Tuple[float, ...]
    thresholds: Tuple[float, ...]
    seeds: Tuple[int, ...]
    lr_lagranges: Tuple[float, ...] = (1e-3,)

    def __post_init__(self):
        for name in ("agents", "safety_coefficients", "thresholds", "seeds", "lr_lagranges"):
            if not getattr(self, name):
                raise ValueError(f"扫描网格的 {name} 不能为空")
        for label in self.agents:
            parse_agent_label(label)

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "SweepGrid":
        sweep = config["sweep"]
        return cls(tuple(sweep["agents"]), tuple(sweep["safety_coefficients"]), tuple(sweep["thresholds"]),
                   tuple(int(s) for s in sweep["seeds"]), tuple(sweep["lr_lagranges"]))

    def points(self, base: ExperimentConfig) -> List[Tuple[ExperimentConfig, int, str]]:
        """按网格顺序展开为 (单种子实验配置, 种子, 行标签)"""
        multi_lr = len(self.lr_lagranges) > 1
        out = []
        for agent in self.agents:
            for safety in self.safety_coefficients:
                for beta in self.thresholds:
                    for lr in self.lr_lagranges:
                        label = f"{agent}@{lr:g}" if multi_lr else agent
                        for seed in self.seeds:
                            config = replace(base, agent=agent, safety_coefficient=safety,
                                             threshold_beta=beta, seeds=(seed,),
                                             agent_config=replace(base.agent_config, lr_lagrange=lr))
                            out.append((config, seed, label))
        return out


def _train_one(config: ExperimentConfig, seed: int, label: str) -> Tuple[RunSummary, str]:
    runner = TrainingRunner(config, seed)
    frame, summary = runner.run()
    path = runner.write_outputs(frame)
    return replace(summary, agent=label), str(path)


class LabHarness:
    """实验主类"""

    def __init__(self, config_loader: Optional[ConfigLoader] = None):
        """
        初始化实验主类

        Args:
            config_loader: 已加载的配置；为空时使用默认配置
        """
        self.logger = logging.getLogger(__name__)
        self.config_loader = config_loader or ConfigLoader()
        if not self.config_loader.config:
            self.config_loader.load_defaults()

    @property
    def config(self) -> Dict[str, Any]:
        return self.config_loader.get_config()

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_config(self.config)

    def run_training(self, config: Optional[ExperimentConfig] = None) -> List[RunSummary]:
        """
        按种子依次训练，写出每个种子的遥测 CSV 与汇总 CSV

        Returns:
            List[RunSummary]: 每个种子一条汇总
        """
        config = config or self.experiment_config()
        for message in config.validate():
            self.logger.warning(message)
        summaries = []
        for seed in config.seeds:
            summary, path = _train_one(config, seed, config.agent)
            self.logger.info(f"遥测已写出: {path}")
            summaries.append(summary)

        out = Path(config.output_dir) / f"summary_{config.agent}_{config.env}.csv"
        summaries_frame(summaries).to_csv(out, index=False)
        self.logger.info(f"汇总已写出: {out}")
        return summaries

    def run_sweep(self, grid: Optional[SweepGrid] = None, base: Optional[ExperimentConfig] = None,
                  workers: Optional[int] = None) -> pd.DataFrame:
        """
        参数扫描：每个网格点一行汇总，末尾追加每个智能体的 mean±stderr 聚合行

        任一运行失败时先写出已完成的行再抛出异常
        """
        grid = grid or SweepGrid.from_config(self.config)
        base = base or self.experiment_config()
        workers = self.config["sweep"]["workers"] if workers is None else workers
        points = grid.points(base)
        for config, _, _ in points[:1]:
            for message in config.validate():
                self.logger.warning(message)
        out = Path(base.output_dir) / "sweep.csv"
        self.logger.info(f"开始参数扫描: {len(points)} 个运行, {workers} 个进程")

        start = time.time()
        summaries: List[RunSummary] = []
        try:
            if workers <= 1:
                for config, seed, label in points:
                    summaries.append(_train_one(config, seed, label)[0])
            else:
                with ProcessPoolExecutor(max_workers=workers, initializer=setup_logging,
                                         initargs=logging_args(self.config)) as pool:
                    futures = [pool.submit(_train_one, c, s, label) for c, s, label in points]
                    try:
                        # 按网格顺序合并，与完成顺序无关
                        for future in futures:
                            summaries.append(future.result()[0])
                    except Exception:
                        for future in futures:
                            future.cancel()
                        raise
        except Exception as e:
            self.logger.error(f"参数扫描失败，已完成 {len(summaries)}/{len(points)} 个运行: {e}")
            self._write_sweep(summaries, out)
            raise

        table = self._write_sweep(summaries, out)
        self.logger.info(f"参数扫描完成，用时 {time.time() - start:.1f}秒，结果: {out}")
        return table

    def _write_sweep(self, summaries: Sequence[RunSummary], out: Path) -> pd.DataFrame:
        out.parent.mkdir(parents=True, exist_ok=True)
        rows = summaries_frame(summaries)
        table = pd.concat([rows, aggregate_summaries(summaries)], ignore_index=True) if summaries else rows
        table.to_csv(out, index=False)
        return table

    def run_gradcheck(self, suite: str, n_instances: int, seed: int = 0,
                      tolerance: Optional[float] = None) -> GradcheckReport:
        report = run_suite(suite, n_instances, seed, tolerance)
        if not report.passed:
            self.logger.error(f"梯度校验失败: {report.summary()}，失败实例 {report.failures[:10]}")
        return report

    def emit_plotdata(self, telemetry_path: Union[str, Path], window: int = 100) -> pd.DataFrame:
        """
        把遥测转换为绘图列：episode, return, J_C_running, lambda, alpha_lambda, scaled_lr

        J_C_running 为回合惩罚的滚动均值
        """
        path = Path(telemetry_path)
        if not path.exists():
            raise TelemetryError(f"遥测文件不存在: {path}")
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise TelemetryError(f"遥测文件无法解析 ({path}): {e}") from e
        missing = [c for c in TELEMETRY_COLUMNS if c not in frame.columns]
        if missing:
            raise TelemetryError(f"遥测文件缺少列 {missing}: {path}")
        if frame.empty:
            raise TelemetryError(f"遥测文件为空: {path}")
        numeric = frame[TELEMETRY_COLUMNS].apply(pd.to_numeric, errors="coerce")
        if numeric.isna().any().any():
            raise TelemetryError(f"遥测文件含非数值数据: {path}")

        plot = pd.DataFrame({
            "episode": numeric["episode"].astype(int),
            "return": numeric["return"],
            "J_C_running": numeric["episode_penalty"].rolling(window, min_periods=1).mean(),
            "lambda": numeric["lambda"],
            "alpha_lambda": numeric["alpha_lambda"],
            "scaled_lr": numeric["scaled_lr"],
        })
        return plot[PLOT_COLUMNS]
