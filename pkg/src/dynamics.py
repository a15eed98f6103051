"""熵动力学：一阶 ΔH 预测、表格恒等式、截断熵界与 GSPO 长度阈值。"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .policy import (
    TabularPolicy,
    action_probs,
    centered_logprobs,
    entropy_gradient,
    policy_gradient,
    score_matrix,
    state_entropy,
)

logger = logging.getLogger(__name__)


def _per_action(policy: TabularPolicy, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (policy.num_actions,):
        raise ValueError(f"逐动作数组长度应为 {policy.num_actions}，实际为 {values.shape}")
    return values


@dataclass(frozen=True)
class EntropyPrediction:
    delta_h_exact: float
    delta_h_diag: float
    learning_rate: float


def predict_delta_h_exact(policy: TabularPolicy, state: int, per_action_advantage, alpha: float) -> float:
    """α·gᵀh，g = Σ π A score，h = -Σ π ψ score"""
    advantage = _per_action(policy, per_action_advantage)
    g = policy_gradient(policy, state, advantage)
    h = entropy_gradient(policy, state)
    return float(alpha * np.dot(g, h))


def predict_delta_h_double_sum(policy: TabularPolicy, state: int, per_action_advantage, alpha: float) -> float:
    """-α Σ_a Σ_a' π(a)π(a') A(a) ψ(a') score(a)·score(a')"""
    advantage = _per_action(policy, per_action_advantage)
    probs = action_probs(policy, state)
    psi = centered_logprobs(policy, state)
    scores = score_matrix(policy, state)
    gram = scores @ scores.T
    total = 0.0
    for a in range(policy.num_actions):
        for b in range(policy.num_actions):
            total += probs[a] * probs[b] * advantage[a] * psi[b] * gram[a, b]
    return float(-alpha * total)


def predict_delta_h_diag(policy: TabularPolicy, state: int, per_action_return, alpha: float) -> float:
    """-α Σ_a π(a)² ψ(a) (R(a) - E_π[R])"""
    returns = _per_action(policy, per_action_return)
    probs = action_probs(policy, state)
    psi = centered_logprobs(policy, state)
    return float(-alpha * np.sum(probs**2 * psi * (returns - np.dot(probs, returns))))


def predict(policy: TabularPolicy, state: int, per_action_advantage, alpha: float) -> EntropyPrediction:
    return EntropyPrediction(
        delta_h_exact=predict_delta_h_exact(policy, state, per_action_advantage, alpha),
        delta_h_diag=predict_delta_h_diag(policy, state, per_action_advantage, alpha),
        learning_rate=alpha,
    )


def predict_repo_delta(policy: TabularPolicy, state: int, per_action_advantage, beta: float, alpha: float) -> float:
    """ΔH + β·α·‖h‖²"""
    h = entropy_gradient(policy, state)
    return predict_delta_h_exact(policy, state, per_action_advantage, alpha) + beta * alpha * float(np.dot(h, h))


def observed_delta_h(policy: TabularPolicy, state: int, per_action_advantage, alpha: float, beta: float = 0.0) -> float:
    """真实走一步精确梯度（优势为 A - βψ）后的熵变化"""
    advantage = _per_action(policy, per_action_advantage) - beta * centered_logprobs(policy, state)
    gradient = np.zeros_like(policy.logits)
    gradient[state] = policy_gradient(policy, state, advantage)
    updated = policy.step(gradient, alpha)
    return state_entropy(updated, state) - state_entropy(policy, state)


def expected_gradient_inner_product(probs, f, g) -> float:
    """⟨E[f·∇logπ], E[g·∇logπ]⟩，按 score 向量显式求和"""
    probs = np.asarray(probs, dtype=np.float64)
    scores = np.eye(probs.size) - probs[np.newaxis, :]
    lhs = np.sum((probs * np.asarray(f))[:, np.newaxis] * scores, axis=0)
    rhs = np.sum((probs * np.asarray(g))[:, np.newaxis] * scores, axis=0)
    return float(np.dot(lhs, rhs))


def centered_covariance(probs, f, g) -> float:
    """E[π·(f - f̄)(g - ḡ)]，其中 f̄ = E_π[f]"""
    probs = np.asarray(probs, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return float(np.sum(probs**2 * (f - np.dot(probs, f)) * (g - np.dot(probs, g))))


@dataclass(frozen=True)
class EntropyBounds:
    lower: float
    upper: float

    def contains(self, entropy: float, tolerance: float = 1e-12) -> bool:
        return self.lower - tolerance <= entropy <= self.upper + tolerance


def entropy_clip_bounds(h_old: float, eps_low: float, eps_high: float) -> EntropyBounds:
    if h_old < 0:
        raise ValueError(f"熵不能为负: {h_old}")
    if not (0 <= eps_low <= 1 and eps_high >= 0):
        raise ValueError(f"截断参数非法: eps_low={eps_low}, eps_high={eps_high}")
    return EntropyBounds((1.0 - eps_low) * h_old, (1.0 + eps_high) * h_old)


def _entropy(probs: np.ndarray) -> float:
    positive = probs[probs > 0]
    return float(-np.sum(positive * np.log(positive)))


@dataclass(frozen=True)
class TrustRegionCheck:
    ratios_valid: bool
    inside_bounds: bool
    h_old: float
    h_new: float


def check_trust_region_pair(p_old, p_new, eps_low: float, eps_high: float) -> TrustRegionCheck:
    """候选分布是否满足逐动作比值约束，以及新熵是否落在截断熵界内"""
    p_old = np.asarray(p_old, dtype=np.float64)
    p_new = np.asarray(p_new, dtype=np.float64)
    ratio = p_new / p_old
    ratios_valid = bool(np.all((ratio >= 1.0 - eps_low) & (ratio <= 1.0 + eps_high)))
    h_old, h_new = _entropy(p_old), _entropy(p_new)
    return TrustRegionCheck(ratios_valid, entropy_clip_bounds(h_old, eps_low, eps_high).contains(h_new), h_old, h_new)


def sample_constrained_pair(p_old, eps_low: float, eps_high: float, rng: np.random.Generator, max_tries: int = 1000):
    """拒绝采样：逐动作因子 ~ U[1-ε_low, 1+ε_high]，归一化后仍满足比值约束才接受"""
    p_old = np.asarray(p_old, dtype=np.float64)
    for _ in range(max_tries):
        candidate = p_old * rng.uniform(1.0 - eps_low, 1.0 + eps_high, size=p_old.size)
        candidate /= np.sum(candidate)
        ratio = candidate / p_old
        if np.all((ratio >= 1.0 - eps_low) & (ratio <= 1.0 + eps_high)):
            return candidate
    raise ValueError(f"{max_tries} 次尝试内未采到满足约束的分布")


def gspo_length_threshold(eps_token: float, eps_gspo: float, side: str = "high") -> float:
    """
    ln(1±ε_token) / ln(1±ε_gspo)：序列短于该长度时，GSPO 的熵界比 token 级截断更紧。
    """
    if side == "high":
        if eps_token <= 0 or eps_gspo <= 0:
            raise ValueError(f"高侧 ε 必须为正: {eps_token}, {eps_gspo}")
        return math.log1p(eps_token) / math.log1p(eps_gspo)
    if side == "low":
        if not (0 < eps_token < 1 and 0 < eps_gspo < 1):
            raise ValueError(f"低侧 ε 必须位于 (0, 1): {eps_token}, {eps_gspo}")
        return math.log1p(-eps_token) / math.log1p(-eps_gspo)
    raise ValueError(f"side 必须为 high 或 low: {side}")


def repo_bonus_equivalence_check(policy: TabularPolicy, state: int, per_action_advantage, beta: float) -> float:
    """A - βψ 的策略梯度与 (A 的策略梯度 + β∇H) 的最大逐分量差"""
    advantage = _per_action(policy, per_action_advantage)
    repo = policy_gradient(policy, state, advantage - beta * centered_logprobs(policy, state))
    augmented = policy_gradient(policy, state, advantage) + beta * entropy_gradient(policy, state)
    return float(np.max(np.abs(repo - augmented)))


@dataclass(frozen=True)
class RepoVarianceReport:
    paired_variance: float
    independent_variance: float


def repo_variance_report(policy: TabularPolicy, state: int, per_action_advantage, beta: float) -> RepoVarianceReport:
    """
    单样本梯度估计的方差（协方差矩阵的迹）：
    配对形式 (A(a) - βψ(a))·score(a) 与独立形式 A(a)·score(a) - βψ(b)·score(b)（a, b 独立采样）。
    两者期望相同。
    """
    advantage = _per_action(policy, per_action_advantage)
    probs = action_probs(policy, state)
    psi = centered_logprobs(policy, state)
    scores = score_matrix(policy, state)

    def trace_variance(weights: np.ndarray) -> float:
        samples = weights[:, np.newaxis] * scores
        mean = probs @ samples
        return float(probs @ np.sum(samples**2, axis=1) - np.dot(mean, mean))

    paired = trace_variance(advantage - beta * psi)
    independent = trace_variance(advantage) + trace_variance(-beta * psi)
    return RepoVarianceReport(paired, independent)
