import json

import numpy as np
import pytest

from src.objectives import Algorithm, ClipLevel
from src.quantize import QuantMode
from src.setting import (
    ConfigError,
    PresetList,
    audit_config_from_dict,
    experiment_config_from_dict,
    load_experiment_config,
    load_presets,
    override_dotted,
)


class TestExperimentConfig:
    def test_parses_full_config(self, small_config):
        small_config["train"].update({"quantization": "bf16-cast", "clip": {"eps_low": 0.1, "eps_high": 0.3, "level": "sequence"}})
        config = experiment_config_from_dict(small_config)
        assert config.name == "tiny"
        assert config.seeds == (0, 1, 2)
        assert config.train.algorithm == Algorithm.GRPO
        assert config.train.quantization == QuantMode.BF16
        assert config.train.clip.level == ClipLevel.SEQUENCE
        assert config.environment.num_arms == 5

    def test_explicit_seed_list(self, small_config):
        small_config["seeds"] = [3, 7]
        assert experiment_config_from_dict(small_config).seeds == (3, 7)

    def test_builds_tasks_and_shared_initial_policy(self, small_config):
        environment = experiment_config_from_dict(small_config).environment
        tasks = environment.build_tasks()
        assert len(tasks) == 1 and tasks[0].num_actions == 5
        first = environment.initial_policy(tasks)
        assert (first.logits == environment.initial_policy(tasks).logits).all()

    def test_explicit_initial_logits(self, small_config):
        small_config["environment"]["init"] = {"kind": "logits", "logits": [2.0, 0.0, 0.0, 0.0, -1.0]}
        environment = experiment_config_from_dict(small_config).environment
        policy = environment.initial_policy(environment.build_tasks())
        np.testing.assert_array_equal(policy.logits, [[2.0, 0.0, 0.0, 0.0, -1.0]])

    @pytest.mark.parametrize(
        "init",
        [{"kind": "pretrained"}, {"kind": "logits"}],
    )
    def test_invalid_init_raises_config_error(self, small_config, init):
        small_config["environment"]["init"] = init
        with pytest.raises(ConfigError):
            experiment_config_from_dict(small_config)

    def test_initial_logits_must_match_action_count(self, small_config):
        small_config["environment"]["init"] = {"kind": "logits", "logits": [1.0, 0.0]}
        environment = experiment_config_from_dict(small_config).environment
        with pytest.raises(ConfigError):
            environment.initial_policy(environment.build_tasks())

    @pytest.mark.parametrize(
        "path, value",
        [
            ("schema_version", 2),
            ("train.algorithm", "PPO"),
            ("train.quantization", "fp8"),
            ("train.group_size", 1),
            ("environment.kind", "gridworld"),
            ("environment.phase", "C"),
            ("seeds", []),
            ("metrics_every", 0),
        ],
    )
    def test_invalid_values_raise_config_error(self, small_config, path, value):
        with pytest.raises(ConfigError):
            experiment_config_from_dict(override_dotted(small_config, path, value))

    def test_token_mdp_needs_tasks(self):
        with pytest.raises(ConfigError):
            experiment_config_from_dict({"environment": {"kind": "token_mdp"}})

    def test_load_from_file(self, tmp_path, small_config):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(small_config), encoding="utf-8")
        assert load_experiment_config(str(path)).name == "tiny"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_experiment_config(str(path))


class TestOverrideDotted:
    def test_returns_copy(self, small_config):
        updated = override_dotted(small_config, "train.learning_rate", 0.1)
        assert updated["train"]["learning_rate"] == 0.1
        assert small_config["train"]["learning_rate"] == 0.5

    def test_creates_missing_sections(self, small_config):
        assert override_dotted(small_config, "controller.zeta_init", 0.01)["controller"] == {"zeta_init": 0.01}

    def test_rejects_non_object_parent(self, small_config):
        with pytest.raises(ConfigError):
            override_dotted(small_config, "name.inner", 1)


class TestAuditConfig:
    def test_defaults(self):
        audit = audit_config_from_dict({"format": "fp16"})
        assert audit.name == "fp16"
        assert audit.samples == 1_000_000

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            audit_config_from_dict({"format": "fp8"})


class TestPresets:
    def test_every_bundled_experiment_parses(self):
        presets = load_presets()
        names = list(presets)
        assert "bandit20_grpo" in names and "sequential_b" in names
        for name in names:
            experiment_config_from_dict(presets[name])

    def test_decoy_suite_covers_every_algorithm_on_one_environment(self):
        presets = load_presets()
        configs = [experiment_config_from_dict(presets[name]) for name in presets if name.startswith("decoy20_")]
        assert {config.train.algorithm for config in configs} == set(Algorithm)
        assert all(config.environment == configs[0].environment for config in configs)
        assert len({(config.train.learning_rate, config.train.iterations, config.seeds) for config in configs}) == 1

    def test_bundled_audits(self):
        presets = load_presets()
        assert presets.audit_names() == ["bf16", "fp16"]
        for name in presets.audit_names():
            audit_config_from_dict(presets.audit(name))

    def test_unknown_names(self):
        presets = PresetList({"experiments": [{"name": "a"}]})
        assert list(presets) == ["a"]
        with pytest.raises(ConfigError):
            presets["b"]
        with pytest.raises(ConfigError):
            presets.audit("bf16")

    def test_items_are_copies(self):
        presets = PresetList({"experiments": [{"name": "a", "train": {"learning_rate": 0.1}}]})
        presets["a"]["train"]["learning_rate"] = 9.0
        assert presets["a"]["train"]["learning_rate"] == 0.1
