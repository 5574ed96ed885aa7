#!/usr/bin/env python3
"""
双层多形态跨模态攻击 - 命令行启动器
子命令: gen-data, train, attack, ablate, report
退出码: 0 成功, 2 配置错误, 3 缺少运行产物
"""

import argparse
import os
import sys

# 添加当前目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# 导入统一日志系统
from core.logger_helper import logger
from core.errors import AttackToolError

DEFAULT_OUT = os.path.join("runs", "default")


def build_parser():
    """构建命令行参数解析器"""
    try:
        from core.version_helper import version_helper
        version_str = f'%(prog)s {version_helper.get_version()}'
    except (OSError, KeyError, ValueError):
        version_str = '%(prog)s 1.0'  # 备用版本号

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value 配置文件路径')
    common.add_argument('--seed', type=int, help='实验种子 (覆盖配置文件)')
    common.add_argument('--out', default=DEFAULT_OUT, help=f'运行目录 (默认 {DEFAULT_OUT})')

    parser = argparse.ArgumentParser(description='双层多形态跨模态攻击优化器')
    parser.add_argument('--version', action='version', version=version_str)
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('gen-data', parents=[common], help='生成多模态合成数据集')
    sub.add_parser('train', parents=[common], help='为每个模态训练嵌入模型')
    attack = sub.add_parser('attack', parents=[common], help='学习 δ (与 η) 并评估迁移效果')
    attack.add_argument('--mode', choices=['grad-only', 'dual-layer', 'evo-only'], help='攻击模式 (覆盖配置文件)')
    ablate = sub.add_parser('ablate', parents=[common], help='在 ablate.* 网格上重复进化层')
    ablate.add_argument('--mode', choices=['dual-layer', 'evo-only'], help='攻击模式 (覆盖配置文件)')
    sub.add_parser('report', parents=[common], help='汇总运行目录中的指标表')
    return parser


def run(argv=None) -> int:
    """解析参数并分派子命令，返回退出码"""
    args = build_parser().parse_args(argv)

    from core import orchestrator
    from core.config_manager import load_config

    try:
        manager = load_config(args.config, seed=args.seed, mode=getattr(args, 'mode', None))
        cfg = manager.to_experiment_config(args.out)
        logger.set_log_level_from_config(cfg.log_level)
        logger.attach_run_directory(args.out, cfg.max_log_files)
        logger.phase_status("命令行", f"开始 {args.command}", f"运行目录 {args.out}, 种子 {cfg.seed}")

        if args.command == 'gen-data':
            manager.echo(os.path.join(args.out, "data"))
            orchestrator.cmd_gen_data(cfg, args.out)
        elif args.command == 'train':
            manager.echo(os.path.join(args.out, "models"))
            orchestrator.cmd_train(cfg, args.out)
        elif args.command == 'attack':
            orchestrator.cmd_attack(cfg, args.out, manager)
        elif args.command == 'ablate':
            orchestrator.cmd_ablate(cfg, args.out, manager)
        elif args.command == 'report':
            orchestrator.cmd_report(args.out)
        return 0
    except AttackToolError as e:
        logger.error(f"{args.command} 失败: {e}")
        return e.exit_code
    finally:
        logger.detach_run_directory()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
