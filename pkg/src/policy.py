"""表格 softmax 策略：每个状态一行 logits，所有量都可以精确计算。"""

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, rel_entr, softmax

logger = logging.getLogger(__name__)

# 形状为 (num_actions,) 的概率向量
ActionDistribution = npt.NDArray[np.float64]
# 形状为 (num_actions,)，对 logits 行的梯度
ScoreVector = npt.NDArray[np.float64]


@dataclass(frozen=True)
class TabularPolicy:
    logits: npt.NDArray[np.float64]

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
            raise ValueError(f"logits 形状必须为 (num_states, num_actions>=2)，实际为 {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits 中存在非有限值")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @property
    def num_states(self) -> int:
        return self.logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    def with_logits(self, logits) -> "TabularPolicy":
        return TabularPolicy(logits)

    def step(self, gradient, learning_rate: float) -> "TabularPolicy":
        """梯度上升一步"""
        return TabularPolicy(self.logits + learning_rate * np.asarray(gradient, dtype=np.float64))

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.zeros((num_states, num_actions)))

    @classmethod
    def random(cls, num_states: int, num_actions: int, rng: np.random.Generator, scale: float = 1.0) -> "TabularPolicy":
        return cls(scale * rng.standard_normal((num_states, num_actions)))


def _check_state(policy: TabularPolicy, state: int):
    if not 0 <= state < policy.num_states:
        raise IndexError(f"状态 {state} 超出范围 [0, {policy.num_states})")


def _check_action(policy: TabularPolicy, action: int):
    if not 0 <= action < policy.num_actions:
        raise IndexError(f"动作 {action} 超出范围 [0, {policy.num_actions})")


def action_probs(policy: TabularPolicy, state: int) -> ActionDistribution:
    _check_state(policy, state)
    return softmax(policy.logits[state])


def log_probs(policy: TabularPolicy, state: int) -> npt.NDArray[np.float64]:
    _check_state(policy, state)
    row = policy.logits[state]
    return row - logsumexp(row)


def policy_log_probs(policy: TabularPolicy) -> npt.NDArray[np.float64]:
    """所有状态的 log 概率，形状同 logits"""
    return policy.logits - logsumexp(policy.logits, axis=1, keepdims=True)


def log_prob(policy: TabularPolicy, state: int, action: int) -> float:
    _check_action(policy, action)
    return float(log_probs(policy, state)[action])


def state_entropy(policy: TabularPolicy, state: int) -> float:
    probs = action_probs(policy, state)
    return float(-np.sum(probs * log_probs(policy, state)))


def policy_entropies(policy: TabularPolicy) -> npt.NDArray[np.float64]:
    logp = policy_log_probs(policy)
    return -np.sum(np.exp(logp) * logp, axis=1)


def centered_logprobs(policy: TabularPolicy, state: int) -> npt.NDArray[np.float64]:
    """ψ(a) = log π(a) + H(π)，在 π 下期望为零"""
    return log_probs(policy, state) + state_entropy(policy, state)


def centered_logprob(policy: TabularPolicy, state: int, action: int) -> float:
    _check_action(policy, action)
    return float(centered_logprobs(policy, state)[action])


def score(policy: TabularPolicy, state: int, action: int) -> ScoreVector:
    """∇ log π(a|s) 对该状态 logits 行的梯度：onehot(a) - π"""
    _check_action(policy, action)
    result = -action_probs(policy, state)
    result[action] += 1.0
    return result


def score_matrix(policy: TabularPolicy, state: int) -> npt.NDArray[np.float64]:
    """第 a 行为 score(a)"""
    probs = action_probs(policy, state)
    return np.eye(policy.num_actions) - probs[np.newaxis, :]


def policy_gradient(policy: TabularPolicy, state: int, per_action_return, baseline: float = 0.0) -> ScoreVector:
    """Σ_a π(a)(R(a) - b) score(a)"""
    returns = np.asarray(per_action_return, dtype=np.float64)
    if returns.shape != (policy.num_actions,):
        raise ValueError(f"per_action_return 长度应为 {policy.num_actions}，实际为 {returns.shape}")
    probs = action_probs(policy, state)
    weighted = probs * (returns - baseline)
    return weighted - probs * np.sum(weighted)


def entropy_gradient(policy: TabularPolicy, state: int) -> ScoreVector:
    """∇H = -Σ_a π(a) ψ(a) score(a)"""
    probs = action_probs(policy, state)
    weighted = probs * centered_logprobs(policy, state)
    return -(weighted - probs * np.sum(weighted))


def kl_divergence(p, q) -> float:
    """KL(p || q)，p 为零的项贡献为零"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"分布形状不一致: {p.shape} vs {q.shape}")
    return float(np.sum(rel_entr(p, q)))
