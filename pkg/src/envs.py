"""奖励环境：多臂老虎机与确定性 token MDP，以及分组采样。"""

import itertools
import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .policy import TabularPolicy, policy_log_probs
from .utils import make_generator

logger = logging.getLogger(__name__)

# 精确期望奖励时允许枚举的最大序列数
MAX_ENUMERATED_SEQUENCES = 200_000


@dataclass(frozen=True)
class BanditTask:
    task_id: int
    arm_rewards: Tuple[float, ...]
    noise_std: float = 0.0

    def __post_init__(self):
        rewards = tuple(float(r) for r in self.arm_rewards)
        if len(rewards) < 2:
            raise ValueError(f"老虎机至少需要 2 个臂，实际为 {len(rewards)}")
        if any(not 0.0 <= r <= 1.0 for r in rewards):
            raise ValueError(f"臂奖励必须位于 [0, 1]: {rewards}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std 不能为负: {self.noise_std}")
        object.__setattr__(self, "arm_rewards", rewards)

    @property
    def num_actions(self) -> int:
        return len(self.arm_rewards)

    @property
    def num_states(self) -> int:
        return 1

    @property
    def horizon(self) -> int:
        return 1

    def state_index(self, position: int, prefix: Tuple[int, ...] = ()) -> int:
        return 0


@dataclass(frozen=True)
class TokenMDP:
    """固定长度的 token 序列任务，状态为位置（可选再按前缀哈希分桶）"""

    task_id: int
    vocab_size: int
    horizon: int
    target: Tuple[int, ...]
    partial_credit: bool = False
    prefix_buckets: int = 0

    def __post_init__(self):
        target = tuple(int(t) for t in self.target)
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size 至少为 2: {self.vocab_size}")
        if self.horizon < 1 or len(target) != self.horizon:
            raise ValueError(f"target 长度 {len(target)} 与 horizon {self.horizon} 不一致")
        if any(not 0 <= t < self.vocab_size for t in target):
            raise ValueError(f"target 中存在越界 token: {target}")
        if self.prefix_buckets < 0:
            raise ValueError(f"prefix_buckets 不能为负: {self.prefix_buckets}")
        object.__setattr__(self, "target", target)

    @property
    def num_actions(self) -> int:
        return self.vocab_size

    @property
    def num_states(self) -> int:
        return self.horizon * max(self.prefix_buckets, 1)

    def state_index(self, position: int, prefix: Tuple[int, ...] = ()) -> int:
        if not 0 <= position < self.horizon:
            raise IndexError(f"位置 {position} 超出 horizon {self.horizon}")
        if self.prefix_buckets == 0:
            return position
        bucket = 0
        for token in prefix:
            bucket = (bucket * (self.vocab_size + 1) + token + 1) % self.prefix_buckets
        return position * self.prefix_buckets + bucket


Task = Union[BanditTask, TokenMDP]


class Step(NamedTuple):
    state: int
    action: int
    sampling_logprob: float


@dataclass(frozen=True)
class Trajectory:
    task_id: int
    steps: Tuple[Step, ...]
    terminal_reward: float

    def __len__(self):
        return len(self.steps)

    @property
    def states(self) -> np.ndarray:
        return np.array([s.state for s in self.steps], dtype=np.int64)

    @property
    def actions(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=np.int64)

    @property
    def sampling_logprobs(self) -> np.ndarray:
        return np.array([s.sampling_logprob for s in self.steps], dtype=np.float64)


@dataclass(frozen=True)
class ExperienceGroup:
    task_id: int
    trajectories: Tuple[Trajectory, ...]

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ValueError(f"每组至少需要 2 条轨迹，实际为 {len(self.trajectories)}")
        for trajectory in self.trajectories:
            if trajectory.task_id != self.task_id:
                raise ValueError(f"轨迹 task_id {trajectory.task_id} 与组 task_id {self.task_id} 不一致")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.terminal_reward for t in self.trajectories], dtype=np.float64)


def check_compatible(policy: TabularPolicy, task: Task):
    if policy.num_actions != task.num_actions:
        raise ValueError(f"策略动作数 {policy.num_actions} 与任务 {task.task_id} 的动作数 {task.num_actions} 不一致")
    if policy.num_states < task.num_states:
        raise ValueError(f"策略状态数 {policy.num_states} 小于任务 {task.task_id} 所需的 {task.num_states}")


def _reward_for_actions(task: Task, actions: Sequence[int], rng: Optional[np.random.Generator] = None) -> float:
    actions = [int(a) for a in actions]
    if len(actions) != task.horizon:
        raise ValueError(f"轨迹长度 {len(actions)} 与任务 horizon {task.horizon} 不一致")
    if any(not 0 <= a < task.num_actions for a in actions):
        raise ValueError(f"轨迹中存在越界动作: {actions}")

    if isinstance(task, BanditTask):
        reward = task.arm_rewards[actions[0]]
        if task.noise_std > 0 and rng is not None:
            reward += task.noise_std * rng.standard_normal()
        return float(reward)

    matches = sum(1 for a, t in zip(actions, task.target) if a == t)
    if task.partial_credit:
        return matches / task.horizon
    return 1.0 if matches == task.horizon else 0.0


def terminal_reward(task: Task, trajectory: Trajectory, rng: Optional[np.random.Generator] = None) -> float:
    """轨迹的终止奖励。老虎机带噪声时需要传入 rng，否则返回无噪声奖励"""
    if trajectory.task_id != task.task_id:
        raise ValueError(f"轨迹 task_id {trajectory.task_id} 与任务 {task.task_id} 不一致")
    return _reward_for_actions(task, trajectory.actions, rng)


def sample_group(policy: TabularPolicy, task: Task, group_size: int, seed: int, *stream: int) -> ExperienceGroup:
    """从 π 采样 K 条轨迹，同一 (seed, stream) 结果逐位一致"""
    if group_size < 2:
        raise ValueError(f"group_size 至少为 2: {group_size}")
    check_compatible(policy, task)

    rng = make_generator(seed, *stream)
    logp = policy_log_probs(policy)
    cdf = np.cumsum(np.exp(logp), axis=1)
    last_action = task.num_actions - 1

    trajectories = []
    for _ in range(group_size):
        prefix: List[int] = []
        steps = []
        for position in range(task.horizon):
            state = task.state_index(position, tuple(prefix))
            # 逆 CDF 采样，尾部舍入误差归到最后一个动作
            action = min(int(np.searchsorted(cdf[state], rng.random() * cdf[state, -1], side="right")), last_action)
            steps.append(Step(state, action, float(logp[state, action])))
            prefix.append(action)
        reward = _reward_for_actions(task, prefix, rng)
        trajectories.append(Trajectory(task.task_id, tuple(steps), reward))
    return ExperienceGroup(task.task_id, tuple(trajectories))


def expected_reward(policy: TabularPolicy, task: Task) -> float:
    """策略在任务上的精确期望奖励（无噪声）"""
    check_compatible(policy, task)
    logp = policy_log_probs(policy)

    if isinstance(task, BanditTask):
        return float(np.dot(np.exp(logp[0]), task.arm_rewards))

    if task.prefix_buckets == 0:
        hit = np.exp([logp[t, task.target[t]] for t in range(task.horizon)])
        if task.partial_credit:
            return float(np.mean(hit))
        return float(np.prod(hit))

    if task.vocab_size**task.horizon > MAX_ENUMERATED_SEQUENCES:
        raise ValueError(f"序列空间 {task.vocab_size}^{task.horizon} 过大，无法精确计算期望奖励")
    total = 0.0
    for actions in itertools.product(range(task.vocab_size), repeat=task.horizon):
        log_p = 0.0
        for position, action in enumerate(actions):
            log_p += logp[task.state_index(position, actions[:position]), action]
        total += np.exp(log_p) * _reward_for_actions(task, actions)
    return float(total)


def make_bandit_task(task_id: int, num_arms: int, seed: int, peak_arm: Optional[int] = None, noise_std: float = 0.0) -> BanditTask:
    """生成一个老虎机：一个满分臂，少量次优臂，其余低奖励"""
    rng = make_generator(seed, task_id)
    rewards = rng.uniform(0.0, 0.4, size=num_arms)
    order = rng.permutation(num_arms)
    if peak_arm is None:
        peak_arm = int(order[0])
    runners_up = [int(a) for a in order if a != peak_arm][: max(num_arms // 10, 1)]
    rewards[runners_up] = rng.uniform(0.5, 0.8, size=len(runners_up))
    rewards[peak_arm] = 1.0
    return BanditTask(task_id, tuple(float(r) for r in rewards), noise_std)


def make_sequential_pair(seed: int, num_arms: int = 20) -> Tuple[BanditTask, BanditTask]:
    """生成两个最优臂不同的老虎机任务，用于顺序学习实验"""
    if num_arms < 2:
        raise ValueError(f"num_arms 至少为 2: {num_arms}")
    rng = make_generator(seed, 0xA11CE)
    peak_a, peak_b = (int(a) for a in rng.choice(num_arms, size=2, replace=False))
    task_a = make_bandit_task(0, num_arms, seed, peak_arm=peak_a)
    task_b = make_bandit_task(1, num_arms, seed, peak_arm=peak_b)
    if int(np.argmax(task_a.arm_rewards)) == int(np.argmax(task_b.arm_rewards)):
        raise ValueError(f"种子 {seed} 生成的两个任务最优臂相同")
    logger.debug(f"顺序任务对: A 最优臂 {peak_a}, B 最优臂 {peak_b}")
    return task_a, task_b
