import asyncio
import json
import os

import pytest

from main import EXIT_CONFIG, EXIT_IO, EXIT_OK, build_parser, main


def _run(argv):
    return asyncio.run(main(argv))


@pytest.fixture
def config_file(tmp_path, small_config):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**small_config, "seeds": 2}), encoding="utf-8")
    return str(path)


class TestParser:
    def test_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for command in ("run", "sequential", "audit", "summarize", "sweep"):
            assert command in out

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["run", "--preset", "x", "--bogus"])
        assert exc.value.code == 2

    def test_config_and_preset_are_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--config", "a.json", "--preset", "b"])


class TestExitCodes:
    def test_run_success(self, tmp_path, config_file, capsys):
        out_dir = str(tmp_path / "out")
        assert _run(["run", "--config", config_file, "--out", out_dir]) == EXIT_OK
        assert os.path.exists(os.path.join(out_dir, "tiny", "seed0.csv"))
        assert os.path.exists(os.path.join(out_dir, "tiny", "seed1.jsonl"))
        assert "seed0.csv" in capsys.readouterr().out

    def test_single_seed(self, tmp_path, config_file):
        out_dir = str(tmp_path / "out")
        assert _run(["run", "--config", config_file, "--seed", "5", "--out", out_dir]) == EXIT_OK
        assert sorted(os.listdir(os.path.join(out_dir, "tiny"))) == ["seed5.csv", "seed5.jsonl"]

    def test_missing_config_file(self, tmp_path):
        assert _run(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_IO

    def test_invalid_config(self, tmp_path, small_config):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**small_config, "train": {"algorithm": "PPO"}}), encoding="utf-8")
        assert _run(["run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_preset(self, tmp_path):
        assert _run(["run", "--preset", "no_such_preset", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_audit(self, tmp_path):
        argv = ["audit", "--format", "fp16", "--samples", "10000", "--clip-tokens", "10000", "--out", str(tmp_path)]
        assert _run(argv) == EXIT_OK
        assert os.path.exists(os.path.join(str(tmp_path), "audit_fp16", "ratio_bias.csv"))

    def test_audit_rejects_small_sample_count(self, tmp_path):
        assert _run(["audit", "--samples", "100", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_summarize(self, tmp_path, config_file, capsys):
        out_dir = str(tmp_path / "out")
        _run(["run", "--config", config_file, "--out", out_dir])
        files = [os.path.join(out_dir, "tiny", f"seed{s}.csv") for s in (0, 1)]
        assert _run(["summarize", *files, "--out", str(tmp_path / "summary.csv")]) == EXIT_OK
        assert "秩相关" in capsys.readouterr().out

    def test_summarize_missing_file(self, tmp_path):
        assert _run(["summarize", str(tmp_path / "none.csv")]) == EXIT_IO

    def test_sweep(self, tmp_path, config_file):
        argv = ["sweep", "--config", config_file, "--param", "train.learning_rate", "--values", "0.1,0.3", "--out", str(tmp_path)]
        assert _run(argv) == EXIT_OK
        assert os.path.isdir(os.path.join(str(tmp_path), "sweep_train.learning_rate_0.3", "tiny"))

    def test_sweep_validates_values_first(self, tmp_path, config_file):
        argv = ["sweep", "--config", config_file, "--param", "train.algorithm", "--values", "GRPO,PPO", "--out", str(tmp_path)]
        assert _run(argv) == EXIT_CONFIG
        assert not os.path.exists(os.path.join(str(tmp_path), "sweep_train.algorithm_GRPO"))
