"""优势估计（RLOO / GRPO）、REPO 修正以及 ζ / ε_high 控制器。"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import numpy.typing as npt

from .policy import TabularPolicy, action_probs, centered_logprobs

logger = logging.getLogger(__name__)


def _check_rewards(rewards) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size < 2:
        raise ValueError(f"组内至少需要 2 个奖励，实际为 {rewards.shape}")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("奖励中存在非有限值")
    return rewards


def rloo_advantages(rewards, form: str = "leave_one_out") -> np.ndarray:
    """
    RLOO 优势：A_i = r_i - mean_{j≠i} r_j

    参数:
    rewards: 组内 K 个终止奖励
    form: "leave_one_out" 直接计算留一均值；"scaled_mean" 使用等价形式 K/(K-1)·(r_i - mean(r))

    返回:
    长度为 K 的优势数组，和为零
    """
    rewards = _check_rewards(rewards)
    k = rewards.size
    if form == "leave_one_out":
        return rewards - (np.sum(rewards) - rewards) / (k - 1)
    if form == "scaled_mean":
        return k / (k - 1) * (rewards - np.mean(rewards))
    raise ValueError(f"未知的 RLOO 形式: {form}")


def grpo_advantages(rewards, sample_std: bool = False) -> Optional[np.ndarray]:
    """GRPO 组归一化优势；组内奖励全部相同时返回 None（该组被过滤）"""
    rewards = _check_rewards(rewards)
    if np.ptp(rewards) == 0.0:
        return None
    std = np.std(rewards, ddof=1 if sample_std else 0)
    if std == 0.0:
        return None
    return (rewards - np.mean(rewards)) / std


def repo_advantage_general(base_advantage, psi, beta: float):
    """A' = A - β ψ，逐 token 计算"""
    return np.asarray(base_advantage, dtype=np.float64) - beta * np.asarray(psi, dtype=np.float64)


@dataclass(frozen=True)
class StateStats:
    """单个状态下的精确统计量：π、ψ 以及逐动作的优势"""

    probs: npt.NDArray[np.float64]
    psi: npt.NDArray[np.float64]
    advantage: npt.NDArray[np.float64]

    def covariance(self) -> float:
        """Σ_a π(a)² ψ(a) (A(a) - E_π[A])"""
        centered = self.advantage - np.dot(self.probs, self.advantage)
        return float(np.sum(self.probs**2 * self.psi * centered))


def state_stats(policy: TabularPolicy, state: int, per_action_advantage) -> StateStats:
    advantage = np.asarray(per_action_advantage, dtype=np.float64)
    if advantage.shape != (policy.num_actions,):
        raise ValueError(f"per_action_advantage 长度应为 {policy.num_actions}，实际为 {advantage.shape}")
    return StateStats(action_probs(policy, state), centered_logprobs(policy, state), advantage)


def repo_d_beta(stats: Optional[StateStats], zeta: float) -> float:
    """β_s = ζ · Σ_a π² ψ (A - E_π[A])，β_s 与 ζ 同号"""
    if stats is None:
        raise ValueError("REPO-D 需要精确的状态统计量")
    return zeta * stats.covariance()


def _repo_r_scale(advantage, value, zeta: float):
    advantage = np.asarray(advantage, dtype=np.float64)
    value = np.asarray(value, dtype=np.float64)
    positive = np.maximum(advantage * (1.0 - zeta * value), 0.0)
    negative = np.minimum(advantage * (1.0 + zeta * value), 0.0)
    result = np.where(advantage > 0, positive, np.where(advantage < 0, negative, 0.0))
    if result.ndim == 0:
        return float(result)
    return result


def repo_r_advantage(base_advantage, sampled_logprob, zeta: float):
    """
    REPO-R 修正：正优势乘 (1 - ζ logπ) 并截到 ≥0，负优势乘 (1 + ζ logπ) 并截到 ≤0，零优势保持为零。
    修正后的优势不会改变符号。
    """
    if np.any(np.asarray(sampled_logprob) > 0):
        raise ValueError("log 概率必须 ≤ 0")
    return _repo_r_scale(base_advantage, sampled_logprob, zeta)


def repo_r_advantage_centered(base_advantage, psi, zeta: float):
    """REPO-R 的中心化变体，用 ψ 代替原始 log 概率"""
    return _repo_r_scale(base_advantage, psi, zeta)


@dataclass(frozen=True)
class ZetaControllerState:
    zeta: float = 1e-3
    zeta_min: float = 1e-4
    zeta_max: float = 0.05
    target_entropy: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.zeta_min <= self.zeta_max:
            raise ValueError(f"ζ 边界非法: [{self.zeta_min}, {self.zeta_max}]")
        if not self.zeta_min <= abs(self.zeta) <= self.zeta_max:
            raise ValueError(f"|ζ|={abs(self.zeta)} 不在 [{self.zeta_min}, {self.zeta_max}] 内")

    @classmethod
    def for_repo_r(cls, zeta: float = 1e-3) -> "ZetaControllerState":
        return cls(zeta, 1e-4, 0.05)

    @classmethod
    def for_repo_d(cls, zeta: float = 1e-3) -> "ZetaControllerState":
        return cls(zeta, 1e-3, 10.0)


def zeta_controller_step(state: ZetaControllerState, entropy: float) -> ZetaControllerState:
    """
    按观测熵调整 ζ：熵高于目标时减弱（必要时翻到负号），低于目标时增强。
    与目标相等时保持不变。
    """
    if state.target_entropy is None:
        raise ValueError("ζ 控制器尚未设置目标熵")
    zeta = state.zeta
    if entropy > state.target_entropy:
        if zeta >= 0:
            zeta /= 2
            if zeta < state.zeta_min:
                zeta = -state.zeta_min
        else:
            zeta = max(-state.zeta_max, 2 * zeta)
    elif entropy < state.target_entropy:
        if zeta >= 0:
            zeta = min(state.zeta_max, 2 * zeta)
        else:
            zeta /= 2
            if zeta > -state.zeta_min:
                zeta = state.zeta_min
    return replace(state, zeta=zeta)


@dataclass(frozen=True)
class AdapoControllerState:
    eps_low: float = 0.2
    eps_high: float = 0.28
    eps_high_min: float = 0.2
    eps_high_max: float = 0.32
    growth: float = 1.05
    decay: float = 0.95
    target_entropy: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.eps_high_min <= self.eps_high <= self.eps_high_max:
            raise ValueError(f"ε_high={self.eps_high} 不在 [{self.eps_high_min}, {self.eps_high_max}] 内")
        if not (self.growth > 1.0 and 0 < self.decay < 1.0):
            raise ValueError(f"增长/衰减系数非法: {self.growth}, {self.decay}")


def adapo_controller_step(state: AdapoControllerState, entropy: float) -> AdapoControllerState:
    if state.target_entropy is None:
        raise ValueError("ADAPO 控制器尚未设置目标熵")
    eps_high = state.eps_high
    if entropy < state.target_entropy:
        eps_high = min(state.eps_high_max, eps_high * state.growth)
    elif entropy > state.target_entropy:
        eps_high = max(state.eps_high_min, eps_high * state.decay)
    return replace(state, eps_high=eps_high)
