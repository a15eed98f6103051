"""实验编排：多种子训练、顺序两任务训练、量化审计、汇总与参数扫描。"""

import asyncio
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import psutil
from scipy.stats import spearmanr

from .common import WORKERS_ENV, get_output_dir
from .envs import Task
from .objectives import ControllerConfig, TrainConfig, init_trainer_state, train_iteration
from .policy import TabularPolicy, policy_entropies
from .quantize import (
    bias_mc_oracle,
    clip_asymmetry_audit,
    effective_clip_bounds,
    format_by_name,
    softmax_grad_underflow_audit,
    ulp,
    underflow_threshold,
)
from .setting import AuditConfig, ConfigError, ExperimentConfig, experiment_config_from_dict, override_dotted
from .utils.metrics_io import MetricsRow, read_metrics, write_metrics_csv, write_metrics_jsonl, write_table_csv

logger = logging.getLogger(__name__)


def worker_count() -> int:
    """并发种子任务数：环境变量优先，否则取物理核心数"""
    value = os.environ.get(WORKERS_ENV)
    if value:
        try:
            return max(int(value), 1)
        except ValueError:
            logger.warning(f"{WORKERS_ENV}={value} 不是整数，改用物理核心数")
    return psutil.cpu_count(logical=False) or 1


@dataclass
class TrainRun:
    policy: TabularPolicy
    rows: List[MetricsRow]
    best_policy: TabularPolicy
    best_iteration: int


def train_run(policy: TabularPolicy, tasks: Sequence[Task], train: TrainConfig, controller: ControllerConfig, metrics_every: int = 1) -> TrainRun:
    """
    完整训练若干迭代，同时记住检查点：训练平均奖励最高的迭代，
    并列时取期望奖励（eval_reward）更高者，仍并列取最早的迭代。
    """
    state = init_trainer_state(train, controller)
    rows = []
    best_policy, best_iteration, best_key = policy, 0, (-np.inf, -np.inf)
    for _ in range(train.iterations):
        policy, row, _, state = train_iteration(policy, tasks, train, state)
        key = (row.mean_reward, row.eval_reward)
        if key > best_key:
            best_policy, best_iteration, best_key = policy, row.iteration, key
        if row.iteration % metrics_every == 0 or row.iteration == train.iterations:
            rows.append(row)
    return TrainRun(policy, rows, best_policy, best_iteration)


def _run_seed(config: ExperimentConfig, seed: int, run_dir: str) -> str:
    tasks = config.environment.build_tasks()
    policy = config.environment.initial_policy(tasks)
    train = replace(config.train, seed=seed)
    logger.debug(f"{config.name}: 种子 {seed} 开始训练 {train.iterations} 次迭代")
    run = train_run(policy, tasks, train, config.controller, config.metrics_every)
    csv_path = os.path.join(run_dir, f"seed{seed}.csv")
    write_metrics_csv(csv_path, run.rows)
    write_metrics_jsonl(os.path.join(run_dir, f"seed{seed}.jsonl"), run.rows)
    return csv_path


async def _gather_limited(jobs):
    semaphore = asyncio.Semaphore(worker_count())

    async def limited(func, *args):
        async with semaphore:
            return await asyncio.to_thread(func, *args)

    return await asyncio.gather(*(limited(func, *args) for func, *args in jobs))


async def run_experiment_async(config: ExperimentConfig, out_dir: Optional[str] = None, seeds: Optional[Sequence[int]] = None) -> List[str]:
    run_dir = os.path.join(get_output_dir(out_dir or config.output), config.name)
    seeds = list(seeds) if seeds is not None else list(config.seeds)
    logger.info(f"开始实验 {config.name}: 算法 {config.train.algorithm.value}, 种子 {seeds}")
    paths = await _gather_limited([(_run_seed, config, seed, run_dir) for seed in seeds])
    logger.info(f"实验 {config.name} 完成，输出目录: {run_dir}")
    return paths


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None, seeds: Optional[Sequence[int]] = None) -> List[str]:
    """每个种子写一份 CSV 与 JSONL，返回 CSV 路径（按种子顺序）"""
    return asyncio.run(run_experiment_async(config, out_dir, seeds))


@dataclass(frozen=True)
class SequentialResult:
    seed: int
    checkpoint_iteration: int
    checkpoint_entropy: float
    iterations_to_threshold: int
    path: str


def _checkpoint_entropy(policy: TabularPolicy, tasks: Sequence[Task]) -> float:
    """检查点在任务可达状态上的平均逐状态熵"""
    states = sorted({state for task in tasks for state in range(task.num_states)})
    return float(np.mean(policy_entropies(policy)[states]))


def _run_sequential_seed(config_a: ExperimentConfig, config_b: ExperimentConfig, seed: int, run_dir: str) -> SequentialResult:
    tasks_a = config_a.environment.build_tasks()
    tasks_b = config_b.environment.build_tasks()
    run_a = train_run(config_a.environment.initial_policy(tasks_a), tasks_a, replace(config_a.train, seed=seed), config_a.controller)

    checkpoint = run_a.best_policy
    train_b = replace(config_b.train, seed=seed)
    run_b = train_run(checkpoint, tasks_b, train_b, config_b.controller)

    reached = [row.iteration for row in run_b.rows if row.eval_reward >= config_b.reward_threshold]
    iterations_to_threshold = reached[0] if reached else train_b.iterations + 1

    rows = run_a.rows + run_b.rows
    phases = {"phase": ["A"] * len(run_a.rows) + ["B"] * len(run_b.rows)}
    path = os.path.join(run_dir, f"sequential_seed{seed}.csv")
    write_metrics_csv(path, rows, phases)
    write_metrics_jsonl(os.path.join(run_dir, f"sequential_seed{seed}.jsonl"), rows, phases)
    entropy = _checkpoint_entropy(checkpoint, tasks_a)
    logger.debug(f"种子 {seed}: 检查点迭代 {run_a.best_iteration}, 熵 {entropy:.4f}, 阶段 B 用时 {iterations_to_threshold}")
    return SequentialResult(seed, run_a.best_iteration, entropy, iterations_to_threshold, path)


async def run_sequential_async(config_a: ExperimentConfig, config_b: ExperimentConfig, out_dir: Optional[str] = None) -> List[SequentialResult]:
    actions_a = {t.num_actions for t in config_a.environment.build_tasks()}
    actions_b = {t.num_actions for t in config_b.environment.build_tasks()}
    if actions_a != actions_b or len(actions_a) != 1:
        raise ConfigError(f"两个阶段的动作空间不兼容: {sorted(actions_a)} vs {sorted(actions_b)}")

    run_dir = os.path.join(get_output_dir(out_dir or config_a.output), f"{config_a.name}__{config_b.name}")
    logger.info(f"开始顺序实验: {config_a.name} -> {config_b.name}, 种子 {list(config_a.seeds)}")
    results = await _gather_limited([(_run_sequential_seed, config_a, config_b, seed, run_dir) for seed in config_a.seeds])
    write_table_csv(
        os.path.join(run_dir, "sequential_summary.csv"),
        ["seed", "checkpoint_iteration", "checkpoint_entropy", "iterations_to_threshold"],
        [[r.seed, r.checkpoint_iteration, r.checkpoint_entropy, r.iterations_to_threshold] for r in results],
    )
    logger.info(f"顺序实验完成，输出目录: {run_dir}")
    return results


def run_sequential(config_a: ExperimentConfig, config_b: ExperimentConfig, out_dir: Optional[str] = None) -> List[SequentialResult]:
    return asyncio.run(run_sequential_async(config_a, config_b, out_dir))


@dataclass
class QuantAuditResult:
    paths: Dict[str, str]
    bias_reports: list
    clip_report: object


def run_quant_audit(audit: AuditConfig, out_dir: Optional[str] = None) -> QuantAuditResult:
    """比值偏差表、成对截断统计表与 softmax 梯度下溢表"""
    fmt = format_by_name(audit.format)
    run_dir = os.path.join(get_output_dir(out_dir), f"audit_{audit.name}")
    logger.info(f"开始量化审计: 格式 {fmt.name}, 样本数 {audit.samples}")

    unit = ulp(1.0, fmt)
    bias_reports = [bias_mc_oracle(r, u, u, audit.samples, audit.seed) for u in (0.0, unit) for r in audit.r_values]
    bias_path = os.path.join(run_dir, "ratio_bias.csv")
    write_table_csv(
        bias_path,
        ["format", "r_true", "ulp_new", "ulp_old", "mean_r_observed", "mc_std_error", "significance",
         "taylor_prediction", "exact_expectation", "raw_mean", "raw_std_error", "samples"],
        [[fmt.name, r.r_true, r.ulp_new, r.ulp_old, r.mean_r_observed, r.mc_std_error, r.significance,
          r.taylor_prediction, r.exact_expectation, r.raw_mean, r.raw_std_error, r.sample_count] for r in bias_reports],
    )

    clip = clip_asymmetry_audit(audit.clip_tokens, fmt, audit.eps_low, audit.eps_high, audit.seed, audit.logratio_std)
    bounds = effective_clip_bounds(audit.eps_low, audit.eps_high, fmt)
    clip_path = os.path.join(run_dir, "clip_asymmetry.csv")
    write_table_csv(
        clip_path,
        ["mode", "tokens", "upper", "lower", "upper_frac", "lower_frac", "upper_shift_sigma", "lower_shift_sigma", "eps_low", "eps_high"],
        [
            ["off", clip.n_tokens, clip.upper_off, clip.lower_off, clip.upper_fraction_off, clip.lower_fraction_off,
             0.0, 0.0, audit.eps_low, audit.eps_high],
            [f"{fmt.name}-cast", clip.n_tokens, clip.upper_cast, clip.lower_cast, clip.upper_fraction_cast, clip.lower_fraction_cast,
             clip.upper_shift_sigma, clip.lower_shift_sigma, bounds.eps_low, bounds.eps_high],
        ],
    )

    underflow_rows = []
    for precision in ("half", "single"):
        threshold = underflow_threshold(precision)
        for p in audit.underflow_probs:
            for fix in (False, True):
                result = softmax_grad_underflow_audit(p, precision, fix)
                underflow_rows.append([precision, threshold.exponent, p, fix, result.sampled_term, result.other_term, result.total])
    underflow_path = os.path.join(run_dir, "softmax_underflow.csv")
    write_table_csv(
        underflow_path,
        ["precision", "threshold_exponent", "prob_p", "fix", "sampled_term", "other_term", "total"],
        underflow_rows,
    )
    logger.info(f"量化审计完成，输出目录: {run_dir}")
    return QuantAuditResult({"ratio_bias": bias_path, "clip_asymmetry": clip_path, "softmax_underflow": underflow_path}, bias_reports, clip)


@dataclass(frozen=True)
class RunSummary:
    path: str
    best_eval_reward: float
    best_iteration: int
    entropy_ratio: float
    cumulative_entropy_at_best: float


@dataclass(frozen=True)
class SummaryTable:
    runs: List[RunSummary]
    # 少于两个运行或输入为常数时无定义
    rank_correlation: Optional[float]


def summarize(paths: Sequence[str], out_path: Optional[str] = None) -> SummaryTable:
    """每个运行的最佳评估奖励、末/初熵比、最佳点的累计熵，以及跨运行的秩相关"""
    if not paths:
        raise ValueError("没有可汇总的指标文件")
    runs = []
    for path in paths:
        rows = read_metrics(path)
        if not rows:
            raise ValueError(f"指标文件为空: {path}")
        best = max(rows, key=lambda row: row.eval_reward)
        initial = rows[0].mean_per_token_entropy
        ratio = rows[-1].mean_per_token_entropy / initial if initial > 0 else float("nan")
        runs.append(RunSummary(path, best.eval_reward, best.iteration, ratio, best.cumulative_entropy))

    correlation = None
    if len(runs) >= 2:
        rho = spearmanr([r.cumulative_entropy_at_best for r in runs], [r.best_eval_reward for r in runs])[0]
        correlation = None if np.isnan(rho) else float(rho)

    if out_path:
        write_table_csv(
            out_path,
            ["path", "best_eval_reward", "best_iteration", "entropy_ratio", "cumulative_entropy_at_best"],
            [[r.path, r.best_eval_reward, r.best_iteration, r.entropy_ratio, r.cumulative_entropy_at_best] for r in runs]
            + [["rank_correlation", "" if correlation is None else correlation, "", "", ""]],
        )
    return SummaryTable(runs, correlation)


async def sweep_async(raw: Dict, key: str, values: Sequence, out_dir: Optional[str] = None) -> Dict[str, List[str]]:
    base = get_output_dir(out_dir or raw.get("output"))
    results = {}
    for value in values:
        config = experiment_config_from_dict(override_dotted(raw, key, value))
        results[str(value)] = await run_experiment_async(config, os.path.join(base, f"sweep_{key}_{value}"))
    return results


def sweep(raw: Dict, key: str, values: Sequence, out_dir: Optional[str] = None) -> Dict[str, List[str]]:
    """对点分键的每个取值各跑一次实验，输出到 <out>/sweep_<key>_<value>/"""
    return asyncio.run(sweep_async(raw, key, values, out_dir))
