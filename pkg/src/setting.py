import copy
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .common import CURRENT_DIR, PRESET_FILE
from .envs import BanditTask, Task, TokenMDP, make_bandit_task, make_sequential_pair
from .objectives import Algorithm, ClipConfig, ClipLevel, ControllerConfig, TrainConfig
from .policy import TabularPolicy
from .quantize import QuantMode
from .utils import make_generator

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENVIRONMENT_KINDS = ("bandit", "bandit_generated", "sequential_pair", "token_mdp")
INIT_KINDS = ("random", "uniform", "logits")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvironmentConfig:
    kind: str = "bandit_generated"
    tasks: Tuple[Dict[str, Any], ...] = ()
    num_arms: int = 20
    num_tasks: int = 1
    task_seed: int = 0
    noise_std: float = 0.0
    phase: str = "A"
    prefix_buckets: int = 0
    init_kind: str = "random"
    init_scale: float = 1.0
    init_seed: int = 0
    init_logits: Tuple[float, ...] = ()

    def build_tasks(self) -> List[Task]:
        if self.kind == "bandit":
            return [BanditTask(i, tuple(t["arm_rewards"]), t.get("noise_std", self.noise_std)) for i, t in enumerate(self.tasks)]
        if self.kind == "bandit_generated":
            return [make_bandit_task(i, self.num_arms, self.task_seed, noise_std=self.noise_std) for i in range(self.num_tasks)]
        if self.kind == "sequential_pair":
            task_a, task_b = make_sequential_pair(self.task_seed, self.num_arms)
            return [task_a if self.phase == "A" else task_b]
        return [
            TokenMDP(
                task_id=i,
                vocab_size=t["vocab_size"],
                horizon=len(t["target"]),
                target=tuple(t["target"]),
                partial_credit=t.get("partial_credit", False),
                prefix_buckets=self.prefix_buckets,
            )
            for i, t in enumerate(self.tasks)
        ]

    def initial_policy(self, tasks: List[Task]) -> TabularPolicy:
        """所有种子共享同一个初始策略（相当于同一个基座模型）"""
        num_actions = {task.num_actions for task in tasks}
        if len(num_actions) != 1:
            raise ConfigError(f"任务的动作数不一致: {sorted(num_actions)}")
        num_states = max(task.num_states for task in tasks)
        if self.init_kind == "uniform":
            return TabularPolicy.uniform(num_states, num_actions.pop())
        if self.init_kind == "logits":
            # 同一行 logits 用于所有状态
            if len(self.init_logits) not in num_actions:
                raise ConfigError(f"init.logits 长度 {len(self.init_logits)} 与动作数 {sorted(num_actions)} 不一致")
            return TabularPolicy(np.tile(np.asarray(self.init_logits, dtype=np.float64), (num_states, 1)))
        return TabularPolicy.random(num_states, num_actions.pop(), make_generator(self.init_seed, 0x1217), self.init_scale)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    environment: EnvironmentConfig
    train: TrainConfig
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    seeds: Tuple[int, ...] = (0,)
    output: Optional[str] = None
    metrics_every: int = 1
    reward_threshold: float = 0.8


@dataclass(frozen=True)
class AuditConfig:
    name: str = "bf16"
    format: str = "bf16"
    samples: int = 1_000_000
    r_values: Tuple[float, ...] = (0.5, 1.0, 2.0)
    seed: int = 0
    clip_tokens: int = 1_000_000
    eps_low: float = 0.2
    eps_high: float = 0.2
    logratio_std: float = 0.15
    underflow_probs: Tuple[float, ...] = (1.0 - 2.0**-25, 1.0 - 2.0**-20, 0.5)


def _read_config(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件 {path} 不是合法的 JSON: {e}")


def _environment_from_dict(env: Dict[str, Any]) -> EnvironmentConfig:
    kind = env.get("kind", "bandit_generated")
    if kind not in ENVIRONMENT_KINDS:
        raise ConfigError(f"未知的环境类型: {kind}，可选 {list(ENVIRONMENT_KINDS)}")
    init = env.get("init", {})
    tasks = tuple(env.get("tasks", []))
    if kind in ("bandit", "token_mdp") and not tasks:
        raise ConfigError(f"环境类型 {kind} 需要至少一个任务")
    if init.get("kind", "random") not in INIT_KINDS:
        raise ConfigError(f"未知的初始化方式: {init.get('kind')}，可选 {list(INIT_KINDS)}")
    if init.get("kind") == "logits" and not init.get("logits"):
        raise ConfigError("init.kind 为 logits 时需要给出 init.logits")
    phase = env.get("phase", "A")
    if phase not in ("A", "B"):
        raise ConfigError(f"phase 必须为 A 或 B: {phase}")
    return EnvironmentConfig(
        kind=kind,
        tasks=tasks,
        num_arms=env.get("num_arms", 20),
        num_tasks=env.get("num_tasks", 1),
        task_seed=env.get("task_seed", 0),
        noise_std=env.get("noise_std", 0.0),
        phase=phase,
        prefix_buckets=env.get("prefix_buckets", 0),
        init_kind=init.get("kind", "random"),
        init_scale=init.get("scale", 1.0),
        init_seed=init.get("seed", 0),
        init_logits=tuple(float(v) for v in init.get("logits", ())),
    )


def _train_from_dict(train: Dict[str, Any]) -> TrainConfig:
    clip = train.get("clip")
    if clip is not None:
        clip = ClipConfig(clip.get("eps_low", 0.2), clip.get("eps_high", 0.2), ClipLevel(clip.get("level", "token")))
    return TrainConfig(
        algorithm=Algorithm(train.get("algorithm", "GRPO")),
        learning_rate=train.get("learning_rate", 0.2),
        epochs=train.get("epochs", 2),
        minibatch_size=train.get("minibatch_size", 4),
        group_size=train.get("group_size", 8),
        iterations=train.get("iterations", 200),
        seed=train.get("seed", 0),
        quantization=QuantMode(train.get("quantization", "off")),
        clip=clip,
        token_mean=train.get("token_mean", True),
        grpo_sample_std=train.get("grpo_sample_std", False),
        repo_r_centered=train.get("repo_r_centered", False),
        project_trust_region=train.get("project_trust_region", False),
        optimizer=train.get("optimizer", "sgd"),
    )


def _controller_from_dict(controller: Dict[str, Any]) -> ControllerConfig:
    return ControllerConfig(
        zeta_init=controller.get("zeta_init", 1e-3),
        zeta_min=controller.get("zeta_min"),
        zeta_max=controller.get("zeta_max"),
        eps_high_init=controller.get("eps_high_init", 0.28),
        eps_high_min=controller.get("eps_high_min", 0.2),
        eps_high_max=controller.get("eps_high_max", 0.32),
        eps_growth=controller.get("eps_growth", 1.05),
        eps_decay=controller.get("eps_decay", 0.95),
    )


def experiment_config_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"不支持的 schema_version: {version}（当前为 {SCHEMA_VERSION}）")
    seeds = raw.get("seeds", 1)
    seeds = tuple(range(seeds)) if isinstance(seeds, int) else tuple(int(s) for s in seeds)
    if len(seeds) < 1:
        raise ConfigError("seeds 至少为 1")
    try:
        config = ExperimentConfig(
            name=raw.get("name", "experiment"),
            environment=_environment_from_dict(raw.get("environment", {})),
            train=_train_from_dict(raw.get("train", {})),
            controller=_controller_from_dict(raw.get("controller", {})),
            seeds=seeds,
            output=raw.get("output"),
            metrics_every=raw.get("metrics_every", 1),
            reward_threshold=raw.get("reward_threshold", 0.8),
        )
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"配置无效: {e}")
    if config.metrics_every < 1:
        raise ConfigError(f"metrics_every 至少为 1: {config.metrics_every}")
    return config


def audit_config_from_dict(raw: Dict[str, Any]) -> AuditConfig:
    try:
        config = AuditConfig(
            name=raw.get("name", raw.get("format", "bf16")),
            format=raw.get("format", "bf16"),
            samples=raw.get("samples", 1_000_000),
            r_values=tuple(raw.get("r_values", (0.5, 1.0, 2.0))),
            seed=raw.get("seed", 0),
            clip_tokens=raw.get("clip_tokens", 1_000_000),
            eps_low=raw.get("eps_low", 0.2),
            eps_high=raw.get("eps_high", 0.2),
            logratio_std=raw.get("logratio_std", 0.15),
            underflow_probs=tuple(raw.get("underflow_probs", AuditConfig.underflow_probs)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"审计配置无效: {e}")
    if config.format not in ("bf16", "fp16"):
        raise ConfigError(f"未知的浮点格式: {config.format}")
    return config


def load_raw_config(path: str) -> Dict[str, Any]:
    raw = _read_config(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"配置文件 {path} 的顶层必须是对象")
    return raw


def load_experiment_config(path: str) -> ExperimentConfig:
    return experiment_config_from_dict(load_raw_config(path))


def override_dotted(raw: Dict[str, Any], key: str, value) -> Dict[str, Any]:
    """返回覆盖了点分键（如 train.learning_rate）的配置副本"""
    result = copy.deepcopy(raw)
    node = result
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"无法覆盖 {key}: {part} 不是对象")
        node = child
    node[parts[-1]] = value
    return result


class PresetList:
    """data.json 中打包的实验与审计预设"""

    _experiments: Dict[str, Dict[str, Any]] = {}
    _audits: Dict[str, Dict[str, Any]] = {}

    def __init__(self, data_json: Optional[Dict[str, Any]] = None):
        self._experiments = {}
        self._audits = {}
        if data_json is not None:
            self.update_preset_list(data_json)

    def update_preset_list(self, data_json):
        self._experiments = {obj["name"]: obj for obj in data_json.get("experiments", [])}
        self._audits = {obj["name"]: obj for obj in data_json.get("audits", [])}

    def __getitem__(self, name) -> Dict[str, Any]:
        if name in self._experiments:
            return copy.deepcopy(self._experiments[name])
        raise ConfigError(f"未找到实验预设: {name}，可选 {list(self._experiments)}")

    def __iter__(self):
        for name in self._experiments:
            yield name

    def audit(self, name) -> Dict[str, Any]:
        if name in self._audits:
            return copy.deepcopy(self._audits[name])
        raise ConfigError(f"未找到审计预设: {name}，可选 {list(self._audits)}")

    def audit_names(self) -> List[str]:
        return list(self._audits)


def load_presets(path: Optional[str] = None) -> PresetList:
    path = path or os.path.join(CURRENT_DIR, PRESET_FILE)
    return PresetList(load_raw_config(path))
