"""
配置文件加载模块
负责加载、校验与序列化 key = value 格式的实验配置
"""

import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional


class ConfigError(ValueError):
    """配置键不存在或取值非法"""


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce_scalar(raw: str, default: Any, key: str) -> Any:
    text = raw.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"{key} 需要布尔值，得到 {raw!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key} 需要{type(default).__name__}，得到 {raw!r}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    return text


def coerce_value(raw: str, default: Any, key: str) -> Any:
    """按默认值的类型转换字符串；列表用逗号分隔"""
    if isinstance(default, list):
        if not raw.strip():
            return []
        element = default[0] if default else ""
        return [_coerce_scalar(part, element, key) for part in raw.split(",")]
    return _coerce_scalar(raw, default, key)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


class ConfigLoader:
    """配置加载器类，负责加载和验证配置文件"""

    def __init__(self, config_path: str = "experiment.conf"):
        """
        初始化配置加载器

        Args:
            config_path: 配置文件路径
        """
        self.config_path = Path(config_path)
        self.config: Dict[str, Any] = {}
        self.logger = logging.getLogger(__name__)

    def load_defaults(self) -> Dict[str, Any]:
        self.config = create_default_config()
        return self.config

    def load_config(self) -> Dict[str, Any]:
        """
        在默认配置之上加载配置文件

        Returns:
            Dict[str, Any]: 配置字典

        Raises:
            FileNotFoundError: 配置文件不存在
            ConfigError: 未知键或非法取值
        """
        if not self.config_path.exists():
            raise FileNotFoundError(f"配置文件不存在: {self.config_path}")

        self.load_defaults()
        try:
            self.parse_text(self.config_path.read_text(encoding="utf-8"))
        except ConfigError as e:
            self.logger.error(f"配置文件解析失败 ({self.config_path}): {e}")
            raise
        self.logger.info(f"配置文件加载成功: {self.config_path}")
        return self.config

    def parse_text(self, text: str):
        """逐行解析 key = value，# 之后为注释"""
        if not self.config:
            self.load_defaults()
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"第 {number} 行缺少 '=': {line!r}")
            key, raw = line.split("=", 1)
            self.set_dotted(key.strip(), raw)

    def set_dotted(self, dotted_key: str, raw: str):
        """按 section.key 设置一个值（字符串形式）"""
        section, key = self._split_key(dotted_key)
        self.config[section][key] = coerce_value(raw, self.config[section][key], dotted_key)

    def apply_override(self, assignment: str):
        """应用命令行 --set key=value"""
        if "=" not in assignment:
            raise ConfigError(f"覆盖项格式应为 key=value: {assignment!r}")
        key, raw = assignment.split("=", 1)
        self.set_dotted(key.strip(), raw)
        self.logger.info(f"配置已覆盖: {key.strip()} = {raw.strip()}")

    def _split_key(self, dotted_key: str):
        if not self.config:
            self.load_defaults()
        section, _, key = dotted_key.partition(".")
        if not key or section not in self.config or key not in self.config[section]:
            raise ConfigError(f"未知配置键: {dotted_key}")
        return section, key

    def validate_config(self) -> List[str]:
        """
        验证配置参数

        Returns:
            List[str]: 风险警告（同时写入日志）

        Raises:
            ConfigError: 非法取值
        """
        from .main import SweepGrid
        from .trainer import ExperimentConfig

        if not self.config:
            raise ConfigError("配置未加载，请先调用 load_config()")
        try:
            warnings = ExperimentConfig.from_config(self.config).validate()
            SweepGrid.from_config(self.config)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e

        level = self.config["logging"]["level"].upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"未知日志级别: {level}")
        if self.config["logging"]["format"] not in ("text", "json"):
            raise ConfigError(f"日志格式只能是 text 或 json: {self.config['logging']['format']}")

        for message in warnings:
            self.logger.warning(message)
        self.logger.info("配置验证通过")
        return warnings

    def get_config(self, section: Optional[str] = None, key: Optional[str] = None) -> Any:
        """
        获取配置值

        Args:
            section: 配置节名称
            key: 配置键名称

        Returns:
            Any: 配置值

        Raises:
            ConfigError: 配置节或键不存在
        """
        if not self.config:
            self.load_defaults()
        if section is None:
            return self.config
        if section not in self.config:
            raise ConfigError(f"配置节不存在: {section}")
        if key is None:
            return self.config[section]
        return self.config[section][self._split_key(f"{section}.{key}")[1]]

    def update_config(self, section: str, key: str, value: Any) -> bool:
        """
        更新配置值（值按默认类型转换）

        Returns:
            bool: 更新是否成功
        """
        self._split_key(f"{section}.{key}")
        raw = format_value(value) if not isinstance(value, str) else value
        self.set_dotted(f"{section}.{key}", raw)
        self.logger.info(f"配置已更新: {section}.{key} = {self.config[section][key]}")
        return True

    def dumps(self) -> str:
        """序列化为 key = value 文本，解析后再序列化结果不变"""
        if not self.config:
            self.load_defaults()
        lines = []
        for section, values in self.config.items():
            lines.append(f"# {section}")
            for key, value in values.items():
                lines.append(f"{section}.{key} = {format_value(value)}")
            lines.append("")
        return "\n".join(lines)

    def save_config(self) -> bool:
        """
        保存配置到文件

        Returns:
            bool: 保存是否成功
        """
        try:
            self.config_path.parent.mkdir(parents=True, exist_ok=True)
            self.config_path.write_text(self.dumps(), encoding="utf-8")
            self.logger.info(f"配置文件保存成功: {self.config_path}")
            return True
        except OSError as e:
            self.logger.error(f"保存配置文件失败: {e}")
            return False


def create_default_config() -> Dict[str, Any]:
    """
    创建默认配置

    Returns:
        Dict[str, Any]: 默认配置字典
    """
    return copy.deepcopy({
        "experiment": {
            "agent": "rc",
            "seeds": [0, 1, 2, 3, 4],
            "episodes": 600,
            "window": 100,
            "kappa": 200.0,
            "rs_lambda": 1.0,
            "output_dir": "results",
            "save_checkpoints": False,
        },
        "env": {
            "name": "pointmass1d",
            "episode_len": 200,
            "safety_coefficient": 0.3,
            "threshold_beta": 0.1,
        },
        "agent": {
            "gamma": 0.99,
            "n_step": 5,
            "lr_actor": 3e-4,
            "lr_critic": 3e-4,
            "lr_lagrange": 1e-3,
            "target_update_period": 100,
            "exploration_sigma": 0.1,
            "batch_size": 64,
            "split_fraction": 0.75,
            "warmup": 1000,
            "learner_period": 4,
            "replay_capacity": 50000,
            "penalty_capacity": 100,
            "actor_hidden": [64, 64],
            "critic_hidden": [64, 64],
            "hidden_activation": "elu",
            "layer_norm": False,
        },
        "metal": {
            "lr_meta": 0.2,
            "alpha_lambda": 0.0,
            "outer_loss_kind": "critic_only",
        },
        "mesh": {
            "lambda_hat": 0.1,
            "upsilon_S": 10.0,
            "upsilon_O": 3.0,
            "formulation": "offset_on_penalty",
            "lr_meta": 1e-3,
            "lr_critic_in": 3e-4,
            "lr_critic_out": 3e-4,
            "meta_hidden": [32],
        },
        "sweep": {
            "agents": ["d4pg", "rs-0.1", "rs-1.0", "rs-10.0", "rs-100.0", "rc", "metal"],
            "safety_coefficients": [0.05, 0.3],
            "thresholds": [0.1],
            "seeds": [0, 1, 2, 3, 4],
            "lr_lagranges": [1e-3],
            "workers": 1,
        },
        "logging": {
            "level": "INFO",
            "format": "text",
            "file": "logs/lab.log",
            "progress_every": 50,
            "max_bytes": 10485760,
            "backup_count": 5,
        },
    })
