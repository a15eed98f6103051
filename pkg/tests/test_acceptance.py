"""20 臂老虎机上的方向性实验，耗时数分钟，默认不运行（pytest -m slow）。"""

from dataclasses import replace

import numpy as np
import pytest

from src.harness import run_experiment, run_sequential, summarize, train_run
from src.setting import experiment_config_from_dict, load_presets

pytestmark = pytest.mark.slow


def _preset_runs(name):
    config = experiment_config_from_dict(load_presets()[name])
    tasks = config.environment.build_tasks()
    policy = config.environment.initial_policy(tasks)
    return [train_run(policy, tasks, replace(config.train, seed=seed), config.controller).rows for seed in config.seeds]


def _median_entropy_ratio(runs):
    return float(np.median([rows[-1].mean_per_token_entropy / rows[0].mean_per_token_entropy for rows in runs]))


def _steady_fraction(rows, band=0.2):
    initial = rows[0].mean_per_token_entropy
    return float(np.mean([abs(row.mean_per_token_entropy - initial) <= band * initial for row in rows]))


@pytest.fixture(scope="module")
def grpo_runs():
    return _preset_runs("bandit20_grpo")


class TestEntropyTrajectories:
    def test_multi_epoch_grpo_collapses_faster_than_rloo(self, grpo_runs):
        assert _median_entropy_ratio(grpo_runs) < _median_entropy_ratio(_preset_runs("bandit20_rloo"))

    def test_wider_upper_clip_keeps_more_entropy(self, grpo_runs):
        assert _median_entropy_ratio(_preset_runs("bandit20_dapo")) > _median_entropy_ratio(grpo_runs)

    @pytest.mark.parametrize("name", ["bandit20_repo_r", "bandit20_adapo"])
    def test_controlled_methods_hold_entropy_near_initial(self, name):
        fractions = [_steady_fraction(rows) for rows in _preset_runs(name)]
        assert np.median(fractions) >= 0.7

    def test_adapo_eps_high_stays_in_range(self):
        for rows in _preset_runs("bandit20_adapo"):
            assert all(0.2 <= row.eps_high <= 0.32 for row in rows)


class TestSequentialLearning:
    def test_repo_r_checkpoints_adapt_faster(self, tmp_path):
        presets = load_presets()
        phase_b = experiment_config_from_dict(presets["sequential_b"])
        medians, entropies = {}, {}
        for name in ("sequential_a_grpo", "sequential_a_repo_r"):
            results = run_sequential(experiment_config_from_dict(presets[name]), phase_b, str(tmp_path))
            medians[name] = np.median([r.iterations_to_threshold for r in results])
            entropies[name] = np.median([r.checkpoint_entropy for r in results])
        assert medians["sequential_a_repo_r"] <= phase_b.train.iterations
        assert medians["sequential_a_repo_r"] < medians["sequential_a_grpo"]
        assert entropies["sequential_a_repo_r"] > entropies["sequential_a_grpo"]


class TestSummary:
    def test_cumulative_entropy_tracks_best_reward_on_decoy_suite(self, tmp_path):
        presets = load_presets()
        paths = []
        for name in presets:
            if name.startswith("decoy20_"):
                paths.extend(run_experiment(experiment_config_from_dict(presets[name]), str(tmp_path)))
        table = summarize(paths, str(tmp_path / "summary.csv"))
        assert table.rank_correlation is not None
        assert table.rank_correlation > 0
