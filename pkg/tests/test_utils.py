import csv

import pytest

from src.common import get_output_dir
from src.utils import make_generator, parse_scalar
from src.utils.metrics_io import METRICS_FIELDS, MetricsRow, read_metrics, write_metrics_csv, write_table_csv


class TestMakeGenerator:
    def test_same_stream_same_numbers(self):
        assert make_generator(1, 2, 3).random() == make_generator(1, 2, 3).random()

    def test_streams_differ(self):
        assert make_generator(1, 2).random() != make_generator(1, 3).random()


class TestParseScalar:
    @pytest.mark.parametrize("text, value", [("3", 3), ("0.25", 0.25), ("true", True), ("False", False), ("GRPO", "GRPO")])
    def test_values(self, text, value):
        assert parse_scalar(text) == value
        assert type(parse_scalar(text)) is type(value)


class TestOutputDir:
    def test_argument_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ENTROPY_LAB_OUT", str(tmp_path / "env"))
        assert get_output_dir(str(tmp_path / "arg")) == str(tmp_path / "arg")
        assert get_output_dir() == str(tmp_path / "env")

    def test_default(self, monkeypatch):
        monkeypatch.delenv("ENTROPY_LAB_OUT", raising=False)
        assert get_output_dir().endswith("outputs")


class TestMetricsFiles:
    def test_extra_columns_come_first_and_none_is_blank(self, tmp_path):
        path = str(tmp_path / "nested" / "m.csv")
        row = MetricsRow(1, 1.5, 1.5, 0.25, 0.5, 0.0, 0.1, None, 0.28, 0)
        write_metrics_csv(path, [row], {"phase": ["A"]})
        with open(path, newline="", encoding="utf-8") as f:
            records = list(csv.reader(f))
        assert records[0] == ["phase"] + METRICS_FIELDS
        assert records[1][0] == "A"
        assert records[1][1 + METRICS_FIELDS.index("zeta")] == ""
        assert read_metrics(path) == [row]

    def test_missing_columns(self, tmp_path):
        path = str(tmp_path / "other.csv")
        write_table_csv(path, ["a", "b"], [[1, 2]])
        with pytest.raises(ValueError):
            read_metrics(path)
