#!/usr/bin/env python3
"""
GCG - 主程序入口

基于高斯掩码的问题关键帧定位工具，在帧嵌入序列上训练一个轻量的高斯生成器，
用可微 Top-K 选出与问题相关的关键帧。

子命令：
- synth: 生成带植入关键帧的合成数据集
- pseudolabel: 计算并缓存伪标签
- train: 联合目标训练
- evaluate: 离散 Top-K 评估及对照分支
- gradcheck: 有限差分梯度校验
- sweep: 单轴消融扫描
- dump-weights: 导出每帧的高斯掩码和权重

作者: GCG开发团队
版本: 1.0.0
"""

import argparse
import os
import sys
from typing import List, Optional

# 添加项目根目录到Python路径，以便导入 src 包
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.config import Config, RunConfig, load_config
from src.core.exceptions import GCGError, GradientCheckError
from src.utils.logger import logger


def _run_config(args: argparse.Namespace) -> RunConfig:
    """读取 --config，再叠加命令行覆盖项"""
    config = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return config.with_overrides(overrides) if overrides else config


def _show_progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def cmd_synth(args: argparse.Namespace) -> None:
    from src.core.synth import SynthSpec, generate_dataset

    spec = SynthSpec.from_json(args.spec)
    if args.seed is not None:
        spec = SynthSpec.from_dict(dict(spec.to_json_dict(), seed=args.seed))
    generate_dataset(spec, args.out, show_progress=_show_progress(args))


def cmd_pseudolabel(args: argparse.Namespace) -> None:
    from src.core.manifest import load_manifest
    from src.core.pseudolabel import label_manifest

    k = args.k if args.k is not None else load_config(args.config).num_select
    label_manifest(load_manifest(args.manifest), k, score_csv=args.out,
                   show_progress=_show_progress(args))


def cmd_train(args: argparse.Namespace) -> None:
    from src.workers.train_worker import TrainWorker

    worker = TrainWorker(_run_config(args), args.manifest, args.out,
                         resume_from=args.checkpoint, eval_manifest_path=args.eval_manifest,
                         show_progress=_show_progress(args))
    worker.run()


def cmd_evaluate(args: argparse.Namespace) -> None:
    from src.workers.eval_worker import EvaluateWorker

    EvaluateWorker(args.checkpoint, args.manifest, args.out,
                   ground_truth_path=args.ground_truth,
                   show_progress=_show_progress(args)).run()


def cmd_gradcheck(args: argparse.Namespace) -> None:
    from src.core.gradcheck import run_gradcheck

    config = _run_config(args) if args.config else None
    seed = args.seed if args.seed is not None else 0
    report = run_gradcheck(config, seed=seed)
    if args.out:
        report.save(args.out)
        logger.info(f"梯度校验报告已保存: {args.out}")
    if not report.passed:
        for check in report.ops:
            if not check.passed:
                logger.error(f"算子 {check.name}: 相对误差 {check.max_rel_error:.3e} {check.error or ''}")
        for check in report.params:
            if not check.passed:
                logger.error(f"参数 {check.name}: 相对误差 {check.max_rel_error:.3e}")
        raise GradientCheckError(report.failed_ops + report.failed_params
                                 + ([report.chain_error] if report.chain_error else []))


def cmd_sweep(args: argparse.Namespace) -> None:
    from src.core.synth import SynthSpec
    from src.workers.sweep_worker import SweepWorker

    worker = SweepWorker(_run_config(args), SynthSpec.from_json(args.spec), args.axis,
                         args.values, args.seeds, args.out, show_progress=_show_progress(args))
    worker.run()


def cmd_dump_weights(args: argparse.Namespace) -> None:
    from src.workers.eval_worker import dump_weights

    dump_weights(args.checkpoint, args.manifest, args.out, show_progress=_show_progress(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcg", description="高斯掩码关键帧定位工具")
    parser.add_argument("--version", action="version", version=f"%(prog)s {Config.APP_VERSION}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="不显示进度条")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="生成合成数据集")
    p.add_argument("--spec", help="数据集规格 JSON，缺省使用默认规格")
    p.add_argument("--out", required=True, help="输出目录")
    p.add_argument("--seed", type=int, help="覆盖规格中的种子")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pseudolabel", parents=[common], help="计算并缓存伪标签")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="运行配置，取其中的 K")
    p.add_argument("--k", type=int, help="伪标签数量，优先于 --config")
    p.add_argument("--out", help="相似度分数 CSV（可选）")
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("train", parents=[common], help="训练")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", help="从检查点继续训练")
    p.add_argument("--eval-manifest", help="每轮额外评估的测试集清单")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="评估检查点")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ground-truth", help="真实标注 sidecar（可选）")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="有限差分梯度校验")
    p.add_argument("--config", help="缺省使用小规模校验实例")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="报告 JSON 路径")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[common], help="单轴消融扫描")
    p.add_argument("--config")
    p.add_argument("--spec", help="合成数据集规格 JSON")
    p.add_argument("--axis", required=True, help="T, sigma, N_intra, N_inter, K, D_G, N, objective")
    p.add_argument("--values", required=True, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-weights", parents=[common], help="导出每帧的掩码和权重")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="输出 CSV")
    p.set_defaults(func=cmd_dump_weights)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    主程序入口函数

    解析子命令并执行；仅在完全成功时返回 0。
    """
    args = build_parser().parse_args(argv)
    try:
        # 验证配置参数
        ok, errors = Config.validate_config()
        if not ok:
            for error in errors:
                logger.error(error)
            logger.error("配置参数验证失败，程序无法启动")
            return 1

        logger.info(f"执行 {args.command}")
        args.func(args)
        logger.info(f"{args.command} 完成")
        return 0

    except GCGError as e:
        logger.error(f"{args.command} 失败: {e}")
        return 1
    except KeyboardInterrupt:
        logger.warning("已中断")
        return 1
    except Exception as e:
        logger.exception(f"{args.command} 出现未预期的错误: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
