#!/usr/bin/env python3
"""
约束强化学习实验启动脚本
"""

import argparse
import logging
import sys
from pathlib import Path

from src.config_loader import ConfigError, ConfigLoader
from src.main import LabHarness, TelemetryError, logging_args, setup_logging


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_GRADCHECK = 2
EXIT_RUNTIME = 3

# 命令行参数 -> 配置键
FLAG_KEYS = {
    "agent": "experiment.agent",
    "env": "env.name",
    "safety_coefficient": "env.safety_coefficient",
    "threshold_beta": "env.threshold_beta",
    "seeds": "experiment.seeds",
    "episodes": "experiment.episodes",
    "outer_loss_kind": "metal.outer_loss_kind",
    "rs_lambda": "experiment.rs_lambda",
    "output": "experiment.output_dir",
    "workers": "sweep.workers",
}


class LabArgumentParser(argparse.ArgumentParser):
    """用法错误统一以退出码 1 结束"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: 错误: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(description='约束强化学习元梯度实验')
    parser.add_argument('--config', help='key = value 格式的配置文件')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='覆盖任意配置键，例如 metal.lr_meta=0.001')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help='日志级别')
    sub = parser.add_subparsers(dest='command', required=True)

    for name, help_text in (('train', '训练一组实验'), ('sweep', '参数扫描')):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument('--agent', help='d4pg / rs / rs-<λ̄> / rc / metal / mesh')
        cmd.add_argument('--env', help='pointmass1d / lqr')
        cmd.add_argument('--safety-coefficient', dest='safety_coefficient')
        cmd.add_argument('--threshold-beta', dest='threshold_beta')
        cmd.add_argument('--seeds', help='逗号分隔的种子列表')
        cmd.add_argument('--episodes')
        cmd.add_argument('--outer-loss-kind', dest='outer_loss_kind',
                         choices=['critic_only', 'actor_only', 'actor_plus_critic'])
        cmd.add_argument('--rs-lambda', dest='rs_lambda')
        cmd.add_argument('--output', help='输出目录')
        if name == 'sweep':
            cmd.add_argument('--workers', help='并行进程数')

    grad = sub.add_parser('gradcheck', help='闭式梯度与有限差分对照')
    grad.add_argument('suite', choices=['approx', 'metal', 'mesh'])
    grad.add_argument('--instances', type=int, default=100)
    grad.add_argument('--seed', type=int, default=0)
    grad.add_argument('--tolerance', type=float)

    plot = sub.add_parser('plotdata', help='由遥测生成绘图数据')
    plot.add_argument('telemetry', nargs='+')
    plot.add_argument('--window', type=int, default=100, help='J_C 滚动窗口')
    plot.add_argument('--out-dir', help='输出目录；单个文件且不给出时打印到标准输出')
    return parser


def load_configuration(args) -> ConfigLoader:
    loader = ConfigLoader(args.config or "experiment.conf")
    if args.config:
        loader.load_config()
    else:
        loader.load_defaults()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            loader.apply_override(f"{key}={value}")
    for assignment in args.set:
        loader.apply_override(assignment)
    if args.log_level:
        loader.apply_override(f"logging.level={args.log_level}")
    return loader


def run_plotdata(harness: LabHarness, args) -> int:
    for name in args.telemetry:
        frame = harness.emit_plotdata(name, args.window)
        if args.out_dir:
            out_dir = Path(args.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            frame.to_csv(out_dir / f"plot_{Path(name).stem}.csv", index=False)
        else:
            sys.stdout.write(frame.to_csv(index=False))
    return EXIT_OK


def main(argv=None) -> int:
    """主函数"""
    args = build_parser().parse_args(argv)

    try:
        loader = load_configuration(args)
        setup_logging(*logging_args(loader.config))
        loader.validate_config()
    except (ConfigError, FileNotFoundError) as e:
        logging.error(f"配置错误: {e}")
        return EXIT_USAGE

    harness = LabHarness(loader)
    try:
        if args.command == 'train':
            harness.run_training()
        elif args.command == 'sweep':
            harness.run_sweep()
        elif args.command == 'gradcheck':
            report = harness.run_gradcheck(args.suite, args.instances, args.seed, args.tolerance)
            print(report.summary())
            return EXIT_OK if report.passed else EXIT_GRADCHECK
        else:
            return run_plotdata(harness, args)
    except ConfigError as e:
        logging.error(f"参数错误: {e}")
        return EXIT_USAGE
    except TelemetryError as e:
        logging.error(f"遥测错误: {e}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("\n接收到中断信号，实验已停止")
        return EXIT_RUNTIME
    except Exception as e:
        logging.error(f"程序运行错误: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
