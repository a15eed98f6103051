"""
代理目标与训练循环：重要性权重、PPO/DAPO/GSPO 截断、梯度组装、
minibatch × epoch 的离策略更新以及截断统计。
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .envs import ExperienceGroup, Task, Trajectory, expected_reward, sample_group
from .estimators import (
    AdapoControllerState,
    ZetaControllerState,
    adapo_controller_step,
    grpo_advantages,
    repo_d_beta,
    repo_r_advantage,
    repo_r_advantage_centered,
    rloo_advantages,
    state_stats,
    zeta_controller_step,
)
from .policy import TabularPolicy, centered_logprobs, entropy_gradient, policy_entropies, policy_log_probs, score_matrix
from .quantize import QuantMode, cast, format_for, observed_ratio
from .utils import make_generator
from .utils.metrics_io import MetricsRow

logger = logging.getLogger(__name__)


class Algorithm(str, Enum):
    RLOO = "RLOO"
    GRPO = "GRPO"
    LOOP = "LOOP"
    DAPO = "DAPO"
    GSPO = "GSPO"
    REPO_R = "REPO-R"
    REPO_D = "REPO-D"
    ADAPO = "ADAPO"
    GRPO_ENTROPY = "GRPO+entropy-bonus"


class ClipLevel(str, Enum):
    TOKEN = "token"
    SEQUENCE = "sequence"


class ClipFlag(IntEnum):
    NONE = 0
    UPPER = 1
    LOWER = 2


@dataclass(frozen=True)
class ClipConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2
    level: ClipLevel = ClipLevel.TOKEN

    def __post_init__(self):
        if not (0 <= self.eps_low < 1 and self.eps_high >= 0):
            raise ValueError(f"截断参数非法: eps_low={self.eps_low}, eps_high={self.eps_high}")
        object.__setattr__(self, "level", ClipLevel(self.level))

    @classmethod
    def ppo(cls) -> "ClipConfig":
        return cls(0.2, 0.2)

    @classmethod
    def dapo(cls) -> "ClipConfig":
        return cls(0.2, 0.28)

    @classmethod
    def gspo(cls) -> "ClipConfig":
        return cls(3e-4, 4e-4, ClipLevel.SEQUENCE)


def default_clip(algorithm: Algorithm) -> Optional[ClipConfig]:
    """各算法默认的截断配置；RLOO 严格同策略，不截断"""
    algorithm = Algorithm(algorithm)
    if algorithm == Algorithm.RLOO:
        return None
    if algorithm in (Algorithm.DAPO, Algorithm.ADAPO):
        return ClipConfig.dapo()
    if algorithm == Algorithm.GSPO:
        return ClipConfig.gspo()
    return ClipConfig.ppo()


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = Algorithm.GRPO
    learning_rate: float = 0.2
    epochs: int = 2
    # None 表示整批
    minibatch_size: Optional[int] = 4
    group_size: int = 8
    iterations: int = 200
    seed: int = 0
    quantization: QuantMode = QuantMode.OFF
    clip: Optional[ClipConfig] = None
    token_mean: bool = True
    grpo_sample_std: bool = False
    repo_r_centered: bool = False
    project_trust_region: bool = False
    # 目前只有朴素梯度上升
    optimizer: str = "sgd"

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "quantization", QuantMode(self.quantization))
        if self.algorithm == Algorithm.RLOO:
            object.__setattr__(self, "epochs", 1)
            object.__setattr__(self, "minibatch_size", None)
        if self.clip is None:
            object.__setattr__(self, "clip", default_clip(self.algorithm))
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate 非法: {self.learning_rate}")
        if self.epochs < 1 or self.iterations < 1:
            raise ValueError(f"epochs/iterations 至少为 1: {self.epochs}, {self.iterations}")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ValueError(f"minibatch_size 至少为 1: {self.minibatch_size}")
        if self.group_size < 2:
            raise ValueError(f"group_size (K) 至少为 2: {self.group_size}")
        if self.optimizer != "sgd":
            raise ValueError(f"不支持的优化器: {self.optimizer}")

    @property
    def uses_rloo_advantage(self) -> bool:
        return self.algorithm in (Algorithm.RLOO, Algorithm.LOOP)


@dataclass(frozen=True)
class ControllerConfig:
    """控制器参数，None 表示使用算法默认值"""

    zeta_init: float = 1e-3
    zeta_min: Optional[float] = None
    zeta_max: Optional[float] = None
    eps_high_init: float = 0.28
    eps_high_min: float = 0.2
    eps_high_max: float = 0.32
    eps_growth: float = 1.05
    eps_decay: float = 0.95


@dataclass
class ClipStats:
    upper: int = 0
    lower: int = 0
    unclipped: int = 0
    overflow: int = 0
    # 迭代结束时落在 [1-ε_low, 1+ε_high] 之外的 token（只记录，不参与总数）
    outside_trust_region: int = 0
    trust_region_tokens: int = 0

    @property
    def total(self) -> int:
        return self.upper + self.lower + self.unclipped

    def merge(self, other: "ClipStats"):
        self.upper += other.upper
        self.lower += other.lower
        self.unclipped += other.unclipped
        self.overflow += other.overflow
        self.outside_trust_region += other.outside_trust_region
        self.trust_region_tokens += other.trust_region_tokens


@dataclass(frozen=True)
class ClipFractions:
    upper: float
    lower: float
    none: float


def clip_fraction_report(stats: ClipStats) -> ClipFractions:
    if stats.total <= 0:
        raise ValueError("截断统计为空")
    total = stats.total
    upper = stats.upper / total
    lower = stats.lower / total
    return ClipFractions(upper, lower, 1.0 - upper - lower)


def token_weight(new_logprob: float, old_logprob: float, quantization: QuantMode = QuantMode.OFF) -> float:
    if not (np.isfinite(new_logprob) and np.isfinite(old_logprob)):
        raise ValueError(f"log 概率必须为有限值: new={new_logprob}, old={old_logprob}")
    quantization = QuantMode(quantization)
    weight = observed_ratio(new_logprob, old_logprob, quantization)
    if not np.isfinite(weight):
        raise ValueError(f"重要性权重溢出: {weight}")
    return weight


def gspo_weight(traj_new_logprobs, traj_old_logprobs) -> float:
    """序列级权重：逐 token 比值的几何平均"""
    new = np.asarray(traj_new_logprobs, dtype=np.float64)
    old = np.asarray(traj_old_logprobs, dtype=np.float64)
    if new.size == 0:
        raise ValueError("轨迹为空")
    if new.shape != old.shape:
        raise ValueError(f"新旧 log 概率长度不一致: {new.shape} vs {old.shape}")
    return float(np.exp(np.mean(new - old)))


def _clip_terms(advantage, weight, clip: Optional[ClipConfig]):
    """逐元素返回 (值, 上截断掩码, 下截断掩码)"""
    advantage = np.asarray(advantage, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    unclipped = advantage * weight
    if clip is None:
        no_clip = np.zeros(unclipped.shape, dtype=bool)
        return unclipped, no_clip, no_clip
    upper_bound = 1.0 + clip.eps_high
    lower_bound = 1.0 - clip.eps_low
    clipped = advantage * np.clip(weight, lower_bound, upper_bound)
    active = clipped < unclipped
    return np.minimum(unclipped, clipped), active & (weight > upper_bound), active & (weight < lower_bound)


def clipped_term(advantage: float, weight: float, clip: ClipConfig) -> Tuple[float, ClipFlag]:
    if weight <= 0:
        raise ValueError(f"重要性权重必须为正: {weight}")
    value, upper, lower = _clip_terms(advantage, weight, clip)
    if upper:
        return float(value), ClipFlag.UPPER
    if lower:
        return float(value), ClipFlag.LOWER
    return float(value), ClipFlag.NONE


def _sequence_weight(new: np.ndarray, old: np.ndarray, quantization: QuantMode) -> float:
    fmt = format_for(quantization)
    if fmt is None:
        return float(np.exp(np.mean(new - old)))
    return float(np.exp(np.mean(cast(new, fmt) - cast(old, fmt))))


def _aligned_advantages(trajectories: Sequence[Trajectory], advantages) -> List[np.ndarray]:
    if len(trajectories) != len(advantages):
        raise ValueError(f"轨迹数 {len(trajectories)} 与优势数 {len(advantages)} 不一致")
    aligned = []
    for trajectory, advantage in zip(trajectories, advantages):
        advantage = np.broadcast_to(np.asarray(advantage, dtype=np.float64), (len(trajectory),))
        aligned.append(advantage)
    return aligned


def _surrogate(
    policy: TabularPolicy,
    trajectories: Sequence[Trajectory],
    advantages,
    clip: Optional[ClipConfig],
    quantization: QuantMode = QuantMode.OFF,
    token_mean: bool = True,
) -> Tuple[float, npt.NDArray[np.float64], ClipStats]:
    if len(trajectories) == 0:
        raise ValueError("batch 为空")
    advantages = _aligned_advantages(trajectories, advantages)
    logp = policy_log_probs(policy)
    probs = np.exp(logp)
    gradient = np.zeros_like(policy.logits)
    stats = ClipStats()
    value = 0.0
    batch_scale = 1.0 / len(trajectories)
    sequence_level = clip is not None and clip.level == ClipLevel.SEQUENCE

    for trajectory, advantage in zip(trajectories, advantages):
        states, actions = trajectory.states, trajectory.actions
        new = logp[states, actions]
        old = trajectory.sampling_logprobs
        length = len(trajectory)

        if sequence_level:
            if np.ptp(advantage) != 0:
                raise ValueError("序列级截断要求整条轨迹共享同一个优势")
            weight = _sequence_weight(new, old, quantization)
            if not np.isfinite(weight):
                stats.overflow += length
                flag = ClipFlag.UPPER if advantage[0] > 0 else ClipFlag.LOWER if advantage[0] < 0 else ClipFlag.NONE
            else:
                term, upper, lower = _clip_terms(advantage[0], weight, clip)
                value += batch_scale * float(term)
                flag = ClipFlag.UPPER if upper else ClipFlag.LOWER if lower else ClipFlag.NONE
                if flag == ClipFlag.NONE:
                    # d w / dθ = w · (1/|τ|) Σ_t score_t
                    coefficient = np.full(length, batch_scale * advantage[0] * weight / length)
                    np.add.at(gradient, (states, actions), coefficient)
                    np.add.at(gradient, states, -coefficient[:, np.newaxis] * probs[states])
            flags = np.full(length, flag)
        else:
            weight = observed_ratio(new, old, quantization)
            overflow = ~np.isfinite(weight)
            safe_weight = np.where(overflow, 1.0, weight)
            terms, upper, lower = _clip_terms(advantage, safe_weight, clip)
            # 溢出的 token 视为截断：不贡献梯度
            upper = upper | (overflow & (advantage > 0))
            lower = lower | (overflow & (advantage < 0))
            blocked = upper | lower | overflow
            scale = batch_scale / length if token_mean else batch_scale
            value += scale * float(np.sum(np.where(overflow, 0.0, terms)))
            coefficient = np.where(blocked, 0.0, scale * advantage * safe_weight)
            np.add.at(gradient, (states, actions), coefficient)
            np.add.at(gradient, states, -coefficient[:, np.newaxis] * probs[states])
            flags = np.where(upper, ClipFlag.UPPER, np.where(lower, ClipFlag.LOWER, ClipFlag.NONE))
            stats.overflow += int(np.sum(overflow))

        stats.upper += int(np.sum(flags == ClipFlag.UPPER))
        stats.lower += int(np.sum(flags == ClipFlag.LOWER))
        stats.unclipped += int(np.sum(flags == ClipFlag.NONE))

    return value, gradient, stats


def surrogate_value(policy, trajectories, advantages, clip: Optional[ClipConfig], quantization=QuantMode.OFF, token_mean=True) -> float:
    """代理目标的标量值：轨迹内 token 平均（或求和），再对轨迹取平均"""
    return _surrogate(policy, trajectories, advantages, clip, quantization, token_mean)[0]


def surrogate_gradient(policy, trajectories, advantages, clip: Optional[ClipConfig], quantization=QuantMode.OFF, token_mean=True):
    """代理目标对 logits 的梯度，以及本次计算的截断统计"""
    _, gradient, stats = _surrogate(policy, trajectories, advantages, clip, quantization, token_mean)
    return gradient, stats


def entropy_bonus_gradient_term(policy: TabularPolicy, visited_states, beta: float, weights=None) -> npt.NDArray[np.float64]:
    """β · Σ_访问状态 ∇H(s)，weights 为每次访问的权重（默认为 1）"""
    if not np.isfinite(beta):
        raise ValueError(f"β 必须为有限值: {beta}")
    visited_states = np.asarray(visited_states, dtype=np.int64)
    weights = np.ones(visited_states.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    gradient = np.zeros_like(policy.logits)
    if beta == 0:
        return gradient
    for state in np.unique(visited_states):
        gradient[state] = beta * np.sum(weights[visited_states == state]) * entropy_gradient(policy, int(state))
    return gradient


def repo_d_expected_extra_gradient(policy: TabularPolicy, visited_states, beta: float) -> npt.NDArray[np.float64]:
    """REPO-D 优势修正 -βψ 在 π 下的期望梯度贡献，逐状态按期望显式求和"""
    gradient = np.zeros_like(policy.logits)
    for state in np.asarray(visited_states, dtype=np.int64):
        probs = np.exp(policy_log_probs(policy)[state])
        psi = centered_logprobs(policy, int(state))
        scores = score_matrix(policy, int(state))
        gradient[state] += np.sum((probs * -beta * psi)[:, np.newaxis] * scores, axis=0)
    return gradient


@dataclass
class TrainerState:
    zeta: Optional[ZetaControllerState] = None
    adapo: Optional[AdapoControllerState] = None
    cumulative_entropy: float = 0.0
    iteration: int = 0


def init_trainer_state(config: TrainConfig, controller: Optional[ControllerConfig] = None) -> TrainerState:
    controller = controller or ControllerConfig()
    state = TrainerState()
    if config.algorithm in (Algorithm.REPO_R, Algorithm.REPO_D, Algorithm.GRPO_ENTROPY):
        base = ZetaControllerState.for_repo_r() if config.algorithm == Algorithm.REPO_R else ZetaControllerState.for_repo_d()
        state.zeta = ZetaControllerState(
            zeta=controller.zeta_init,
            zeta_min=controller.zeta_min if controller.zeta_min is not None else base.zeta_min,
            zeta_max=controller.zeta_max if controller.zeta_max is not None else base.zeta_max,
        )
    if config.algorithm == Algorithm.ADAPO:
        clip = config.clip or ClipConfig.dapo()
        state.adapo = AdapoControllerState(
            eps_low=clip.eps_low,
            eps_high=controller.eps_high_init,
            eps_high_min=controller.eps_high_min,
            eps_high_max=controller.eps_high_max,
            growth=controller.eps_growth,
            decay=controller.eps_decay,
        )
    return state


def _base_advantages(group: ExperienceGroup, config: TrainConfig) -> Optional[np.ndarray]:
    if config.uses_rloo_advantage:
        return rloo_advantages(group.rewards)
    return grpo_advantages(group.rewards, config.grpo_sample_std)


def _repo_d_betas(policy: TabularPolicy, trajectories, advantages, zeta: float) -> dict:
    """逐状态 β_s；每个状态的逐动作优势取 batch 中该 (s, a) 的平均，未采到的动作取该状态的平均"""
    sums: dict = {}
    for trajectory, advantage in zip(trajectories, advantages):
        for state, action, a in zip(trajectory.states, trajectory.actions, advantage):
            per_state = sums.setdefault(int(state), {})
            total, count = per_state.get(int(action), (0.0, 0))
            per_state[int(action)] = (total + float(a), count + 1)
    betas = {}
    for state, per_action in sums.items():
        means = {action: total / count for action, (total, count) in per_action.items()}
        fallback = float(np.mean(list(means.values())))
        per_action_advantage = np.array([means.get(a, fallback) for a in range(policy.num_actions)])
        betas[state] = repo_d_beta(state_stats(policy, state, per_action_advantage), zeta)
    return betas


def _token_advantages(policy: TabularPolicy, trajectories, base_advantages, config: TrainConfig, state: TrainerState) -> List[np.ndarray]:
    """按算法对基础优势做逐 token 修正，ψ / logπ 取当前（epoch 内）策略并视为常数"""
    aligned = _aligned_advantages(trajectories, base_advantages)
    if config.algorithm == Algorithm.REPO_R:
        logp = policy_log_probs(policy)
        result = []
        for trajectory, advantage in zip(trajectories, aligned):
            if config.repo_r_centered:
                psi = np.array([centered_logprobs(policy, int(s))[a] for s, a in zip(trajectory.states, trajectory.actions)])
                result.append(repo_r_advantage_centered(advantage, psi, state.zeta.zeta))
            else:
                result.append(np.asarray(repo_r_advantage(advantage, logp[trajectory.states, trajectory.actions], state.zeta.zeta)))
        return result
    if config.algorithm == Algorithm.REPO_D:
        betas = _repo_d_betas(policy, trajectories, aligned, state.zeta.zeta)
        result = []
        for trajectory, advantage in zip(trajectories, aligned):
            psi = np.array([centered_logprobs(policy, int(s))[a] for s, a in zip(trajectory.states, trajectory.actions)])
            beta = np.array([betas[int(s)] for s in trajectory.states])
            result.append(advantage - beta * psi)
        return result
    return aligned


def _iteration_clip(config: TrainConfig, state: TrainerState) -> Optional[ClipConfig]:
    if state.adapo is not None:
        return replace(config.clip, eps_high=state.adapo.eps_high)
    return config.clip


def project_to_trust_region(sampling: TabularPolicy, updated: TabularPolicy, clip: ClipConfig) -> TabularPolicy:
    """逐状态把新策略朝采样策略收缩，使所有动作的概率比落在 [1-ε_low, 1+ε_high] 内"""
    old_probs = np.exp(policy_log_probs(sampling))
    new_probs = np.exp(policy_log_probs(updated))
    ratio = new_probs / old_probs
    limits = np.ones_like(ratio)
    above = ratio > 1.0 + clip.eps_high
    below = ratio < 1.0 - clip.eps_low
    limits[above] = clip.eps_high / (ratio[above] - 1.0)
    limits[below] = clip.eps_low / (1.0 - ratio[below])
    mix = np.min(limits, axis=1, keepdims=True)
    # 留一点余量，避免舍入后恰好越界
    mix = np.where(mix < 1.0, mix * (1.0 - 1e-9), 1.0)
    return TabularPolicy(np.log(old_probs + mix * (new_probs - old_probs)))


def _trust_region_violations(policy: TabularPolicy, trajectories, clip: Optional[ClipConfig]) -> Tuple[int, int]:
    if clip is None or clip.level != ClipLevel.TOKEN or not trajectories:
        return 0, 0
    logp = policy_log_probs(policy)
    outside = tokens = 0
    for trajectory in trajectories:
        ratio = np.exp(logp[trajectory.states, trajectory.actions] - trajectory.sampling_logprobs)
        outside += int(np.sum((ratio > 1.0 + clip.eps_high) | (ratio < 1.0 - clip.eps_low)))
        tokens += len(trajectory)
    return outside, tokens


def train_iteration(
    policy: TabularPolicy,
    tasks: Sequence[Task],
    config: TrainConfig,
    state: TrainerState,
) -> Tuple[TabularPolicy, MetricsRow, ClipStats, TrainerState]:
    """
    一次训练迭代：每个任务采样一组 K 条轨迹，计算优势（必要时做 REPO 修正），
    按 epochs × minibatch 做梯度上升，最后用本轮经验的熵更新控制器。
    """
    iteration = state.iteration + 1
    sampling_policy = policy
    groups = [sample_group(policy, task, config.group_size, config.seed, iteration, index) for index, task in enumerate(tasks)]

    # 本轮经验上的精确逐 token 熵（按访问次数加权）
    entropies = policy_entropies(policy)
    visited = np.concatenate([t.states for g in groups for t in g.trajectories])
    mean_entropy = float(np.mean(entropies[visited]))
    sampled_entropy = float(-np.mean(np.concatenate([t.sampling_logprobs for g in groups for t in g.trajectories])))
    mean_reward = float(np.mean(np.concatenate([g.rewards for g in groups])))

    if state.zeta is not None and state.zeta.target_entropy is None:
        state.zeta = replace(state.zeta, target_entropy=mean_entropy)
    if state.adapo is not None and state.adapo.target_entropy is None:
        state.adapo = replace(state.adapo, target_entropy=mean_entropy)

    trajectories: List[Trajectory] = []
    base_advantages: List[float] = []
    for group in groups:
        advantages = _base_advantages(group, config)
        if advantages is None:
            logger.debug(f"迭代 {iteration}: 任务 {group.task_id} 的组奖励全部相同，已跳过")
            continue
        trajectories.extend(group.trajectories)
        base_advantages.extend(float(a) for a in advantages)

    clip = _iteration_clip(config, state)
    stats = ClipStats()
    if trajectories and config.learning_rate > 0:
        rng = make_generator(config.seed, iteration, 0xB47C)
        batch_size = config.minibatch_size or len(trajectories)
        for _ in range(config.epochs):
            order = rng.permutation(len(trajectories)) if config.minibatch_size else np.arange(len(trajectories))
            for start in range(0, len(order), batch_size):
                index = order[start : start + batch_size]
                batch = [trajectories[i] for i in index]
                advantages = _token_advantages(policy, batch, [base_advantages[i] for i in index], config, state)
                gradient, batch_stats = surrogate_gradient(policy, batch, advantages, clip, config.quantization, config.token_mean)
                if config.algorithm == Algorithm.GRPO_ENTROPY:
                    states = np.concatenate([t.states for t in batch])
                    weights = np.concatenate([np.full(len(t), 1.0 / (len(batch) * (len(t) if config.token_mean else 1))) for t in batch])
                    gradient = gradient + entropy_bonus_gradient_term(policy, states, state.zeta.zeta, weights)
                policy = policy.step(gradient, config.learning_rate)
                stats.merge(batch_stats)
        if config.project_trust_region and clip is not None:
            policy = project_to_trust_region(sampling_policy, policy, clip)
    elif trajectories:
        # α = 0 时仍然统计截断（同策略，全部未截断）
        _, stats = surrogate_gradient(policy, trajectories, base_advantages, clip, config.quantization, config.token_mean)

    stats.outside_trust_region, stats.trust_region_tokens = _trust_region_violations(policy, trajectories, clip)
    if stats.overflow:
        logger.warning(f"迭代 {iteration}: {stats.overflow} 个 token 的重要性权重在 {config.quantization.value} 下溢出")

    zeta_used = None if state.zeta is None else float(state.zeta.zeta)
    if state.zeta is not None:
        state.zeta = zeta_controller_step(state.zeta, mean_entropy)
    if state.adapo is not None:
        state.adapo = adapo_controller_step(state.adapo, mean_entropy)

    if stats.total > 0:
        fractions = clip_fraction_report(stats)
        upper_frac, lower_frac = fractions.upper, fractions.lower
    else:
        logger.warning(f"迭代 {iteration}: 所有组都被过滤，截断统计为空")
        upper_frac = lower_frac = 0.0

    state.iteration = iteration
    state.cumulative_entropy += mean_entropy
    row = MetricsRow(
        iteration=iteration,
        mean_per_token_entropy=mean_entropy,
        cumulative_entropy=state.cumulative_entropy,
        mean_reward=mean_reward,
        eval_reward=float(np.mean([expected_reward(policy, task) for task in tasks])),
        clip_upper_frac=upper_frac,
        clip_lower_frac=lower_frac,
        zeta=zeta_used,
        eps_high=None if clip is None else float(clip.eps_high),
        seed=config.seed,
        sampled_token_entropy=sampled_entropy,
        fp16_overflow=stats.overflow,
    )
    logger.debug(f"迭代 {iteration}: H={mean_entropy:.4f}, 奖励={mean_reward:.4f}, 评估={row.eval_reward:.4f}")
    return policy, row, stats, state
