import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    mean_per_token_entropy: float
    cumulative_entropy: float
    mean_reward: float
    eval_reward: float
    clip_upper_frac: float
    clip_lower_frac: float
    zeta: Optional[float]
    eps_high: Optional[float]
    seed: int
    # 以下为附加列，固定排在后面
    sampled_token_entropy: float = 0.0
    fp16_overflow: int = 0


METRICS_FIELDS = [f.name for f in fields(MetricsRow)]
_INT_FIELDS = {"iteration", "seed", "fp16_overflow"}


def _csv_value(value) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def write_metrics_csv(path: str, rows: Sequence[MetricsRow], extra_columns: Optional[Dict[str, Sequence]] = None):
    """写 CSV，表头顺序与 MetricsRow 字段一致；extra_columns 作为前置列（例如顺序实验的 phase）"""
    extra_columns = extra_columns or {}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(extra_columns) + METRICS_FIELDS)
        for i, row in enumerate(rows):
            values = asdict(row)
            prefix = [_csv_value(column[i]) for column in extra_columns.values()]
            writer.writerow(prefix + [_csv_value(values[name]) for name in METRICS_FIELDS])
    logger.debug(f"已写入 {len(rows)} 行指标: {path}")


def write_metrics_jsonl(path: str, rows: Sequence[MetricsRow], extra_columns: Optional[Dict[str, Sequence]] = None):
    extra_columns = extra_columns or {}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for i, row in enumerate(rows):
            record = {name: column[i] for name, column in extra_columns.items()}
            record.update(asdict(row))
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def _parse_field(name: str, text: str):
    if text == "":
        return None
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


def read_metrics_csv(path: str) -> List[MetricsRow]:
    """读取 write_metrics_csv 写出的文件，忽略非 MetricsRow 列"""
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [name for name in METRICS_FIELDS if name not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"指标文件 {path} 缺少字段: {missing}")
        return [MetricsRow(**{name: _parse_field(name, record[name]) for name in METRICS_FIELDS}) for record in reader]


def read_metrics_jsonl(path: str) -> List[MetricsRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                record = json.loads(line)
                rows.append(MetricsRow(**{name: record.get(name) for name in METRICS_FIELDS}))
    return rows


def read_metrics(path: str) -> List[MetricsRow]:
    if path.endswith(".jsonl"):
        return read_metrics_jsonl(path)
    return read_metrics_csv(path)


def write_table_csv(path: str, header: Iterable[str], rows: Iterable[Sequence]):
    """通用表格写出（审计报告、汇总表）"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_csv_value(v) for v in row])
