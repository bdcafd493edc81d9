"""
RelPose Adapt - 关系能量驱动的跨模态三维姿态自适应

在完全合成的火柴人世界中:
- 从无配对姿态学习姿态与运动潜空间 (对抗自编码器)
- 在带标签源域上训练图像编码器
- 通过对比能量与关系网络能量把编码器适配到无标签目标域视频
- 评估、消融、潜空间距离报告与图表

版本: 1.0.0
"""

__version__ = "1.0.0"

from . import core, utils

__all__ = ["core", "utils", "main"]

STAGE_COMMANDS = (
    "gen-data", "train-pose-aae", "train-motion-aae", "train-source",
    "train-relations", "rank-relations", "adapt", "evaluate", "ablation", "relation-sweep",
)


def build_parser():
    """命令行解析器: 每个子命令都接受 --config / --out / --seed"""
    import argparse

    parser = argparse.ArgumentParser(
        prog="relpose-adapt",
        description="关系姿态自适应流水线 - 数据生成、预训练、关系网络、目标域适配与评估",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--debug", action="store_true", help="启用 DEBUG 日志")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON 配置文件, 缺省使用默认配置")
    common.add_argument("--out", default="out", help="产物目录 (默认: out)")
    common.add_argument("--seed", type=int, default=None, help="把所有配置节的种子改为 seed + 固定偏移")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"执行阶段 {name}")
    run_all = sub.add_parser("run-all", parents=[common], help="按顺序执行全部阶段 (可恢复)")
    run_all.add_argument("--no-resume", action="store_true", help="忽略已完成阶段, 全部重新执行")
    run_all.add_argument("--ablation", action="store_true", help="结束后执行消融")
    run_all.add_argument("--sweep", action="store_true", help="结束后执行关系扫描")
    sub.add_parser("plots", parents=[common], help="根据报告生成 PNG 图表")
    sub.add_parser("schema", parents=[common], help="输出配置的 JSON Schema")
    sub.add_parser("serve", parents=[common], help="启动 MCP 服务器")
    return parser


def _run_command(args) -> int:
    import json
    import os

    from .core.config import config_schema, load_config

    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2, ensure_ascii=False))
        return 0
    if args.command == "serve":
        os.environ.setdefault("RELPOSE_OUT_DIR", args.out)
        from .main import main as run_main
        run_main()
        return 0

    from .tools.pipeline_tools import PipelineRunner, read_report, run_pipeline
    from .tools.plot_tools import emit_plots

    if args.command == "plots":
        report = read_report(os.path.join(args.out, "reports", "report.json"))
        paths = emit_plots(report, args.out)
        print(json.dumps([str(path) for path in paths], indent=2))
        return 0

    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)

    if args.command == "run-all":
        report = run_pipeline(config, args.out, resume=not args.no_resume, with_ablation=args.ablation,
                              with_sweep=args.sweep)
    else:
        report = PipelineRunner(config, args.out).run_stage(args.command)

    summary = {
        "completed_stages": report.completed_stages,
        "metrics": {name: metric.model_dump() for name, metric in report.metrics.items()},
    }
    print(json.dumps(summary, indent=2, ensure_ascii=False))
    return 0


def main(argv=None) -> int:
    """
    命令行入口

    退出码: 0 成功, 2 配置错误, 3 阶段顺序错误, 4 训练失败
    """
    import logging
    import os
    import sys

    from .core.errors import RelPoseError

    args = build_parser().parse_args(argv)
    if args.command != "serve":
        from .main import setup_logging
        setup_logging(args.debug, log_dir=os.path.join(args.out, "logs"))
    logger = logging.getLogger(__name__)

    try:
        return _run_command(args)
    except RelPoseError as e:
        logger.error(f"{args.command} 失败 [{e.error_code}]: {e.message}", exc_info=args.debug)
        print(f"错误 [{e.error_code}]: {e.message}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("用户中断")
        return 130
