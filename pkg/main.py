import argparse
import asyncio
import logging
import os
import sys

from src.common import ENTROPY_LAB_VERSION
from src.harness import run_experiment_async, run_quant_audit, run_sequential_async, summarize, sweep_async
from src.setting import (
    AuditConfig,
    ConfigError,
    audit_config_from_dict,
    experiment_config_from_dict,
    load_presets,
    load_raw_config,
    override_dotted,
)
from src.utils import parse_scalar

logging.basicConfig(level=os.environ.get("LOGLEVEL", "INFO").upper())

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=f"Entropy Lab {ENTROPY_LAB_VERSION}: 策略梯度熵动力学实验台")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="按配置运行多种子训练实验")
    _add_config_arguments(run)
    run.add_argument("--seed", type=int, help="只运行指定种子")
    run.add_argument("--out", type=str, help="输出目录，默认取 ENTROPY_LAB_OUT 或 ./outputs")

    sequential = commands.add_parser("sequential", help="先在任务 A 上训练，再从最佳检查点继续训练任务 B")
    sequential.add_argument("--config-a", type=str, help="阶段 A 配置文件")
    sequential.add_argument("--preset-a", type=str, help="阶段 A 使用 data.json 中的预设")
    sequential.add_argument("--config-b", type=str, help="阶段 B 配置文件")
    sequential.add_argument("--preset-b", type=str, help="阶段 B 使用 data.json 中的预设")
    sequential.add_argument("--out", type=str, help="输出目录")

    audit = commands.add_parser("audit", help="bf16/fp16 量化审计")
    audit.add_argument("--format", choices=["bf16", "fp16"], default="bf16", help="浮点格式")
    audit.add_argument("--samples", type=int, help="蒙特卡洛样本数")
    audit.add_argument("--clip-tokens", type=int, help="截断审计的 token 数")
    audit.add_argument("--seed", type=int, help="随机种子")
    audit.add_argument("--preset", type=str, help="使用 data.json 中的审计预设")
    audit.add_argument("--out", type=str, help="输出目录")

    summary = commands.add_parser("summarize", help="汇总若干指标文件")
    summary.add_argument("files", nargs="+", help="CSV 或 JSONL 指标文件")
    summary.add_argument("--out", type=str, help="汇总表输出路径（CSV）")

    sweep = commands.add_parser("sweep", help="对一个配置键的多个取值分别运行实验")
    _add_config_arguments(sweep)
    sweep.add_argument("--param", type=str, required=True, help="点分配置键，例如 train.learning_rate")
    sweep.add_argument("--values", type=str, required=True, help="逗号分隔的取值列表")
    sweep.add_argument("--out", type=str, help="输出目录")
    return parser


def _add_config_arguments(parser: argparse.ArgumentParser):
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", type=str, help="实验配置文件（JSON）")
    group.add_argument("--preset", type=str, help="使用 data.json 中的实验预设")


def _load_raw(config_path, preset_name):
    if config_path:
        return load_raw_config(config_path)
    if preset_name:
        return load_presets()[preset_name]
    raise ConfigError("需要 --config 或 --preset")


async def run_command(args):
    config = experiment_config_from_dict(_load_raw(args.config, args.preset))
    seeds = [args.seed] if args.seed is not None else None
    paths = await run_experiment_async(config, args.out, seeds)
    for path in paths:
        print(path)


async def sequential_command(args):
    config_a = experiment_config_from_dict(_load_raw(args.config_a, args.preset_a))
    config_b = experiment_config_from_dict(_load_raw(args.config_b, args.preset_b))
    results = await run_sequential_async(config_a, config_b, args.out)
    for result in results:
        print(f"种子 {result.seed}: 检查点迭代 {result.checkpoint_iteration}, 达到阈值用时 {result.iterations_to_threshold} 次迭代")


async def audit_command(args):
    raw = load_presets().audit(args.preset) if args.preset else {"format": args.format}
    for key, value in (("samples", args.samples), ("clip_tokens", args.clip_tokens), ("seed", args.seed)):
        if value is not None:
            raw[key] = value
    audit: AuditConfig = audit_config_from_dict(raw)
    result = await asyncio.to_thread(run_quant_audit, audit, args.out)
    for path in result.paths.values():
        print(path)


async def summarize_command(args):
    table = summarize(args.files, args.out)
    for run in table.runs:
        print(f"{run.path}: 最佳评估奖励 {run.best_eval_reward:.4f}, 熵比 {run.entropy_ratio:.4f}, 累计熵 {run.cumulative_entropy_at_best:.4f}")
    if table.rank_correlation is None:
        print("秩相关: 无（运行数不足或输入为常数）")
    else:
        print(f"秩相关: {table.rank_correlation:.4f}")


async def sweep_command(args):
    raw = _load_raw(args.config, args.preset)
    values = [parse_scalar(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values 不能为空")
    # 先校验每个取值，避免跑到一半才失败
    for value in values:
        experiment_config_from_dict(override_dotted(raw, args.param, value))
    results = await sweep_async(raw, args.param, values, args.out)
    for value, paths in results.items():
        print(f"{args.param}={value}: {len(paths)} 个指标文件")


COMMANDS = {
    "run": run_command,
    "sequential": sequential_command,
    "audit": audit_command,
    "summarize": summarize_command,
    "sweep": sweep_command,
}


async def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        await COMMANDS[args.command](args)
    except ConfigError as e:
        logging.error(f"配置错误: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logging.error(f"读写文件失败: {getattr(e, 'filename', None) or ''} {e}")
        return EXIT_IO
    except ValueError as e:
        logging.error(f"输入无效: {e}")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
