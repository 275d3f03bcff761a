"""
指标记录模块

该模块负责把训练和评估指标写成 CSV，包括：
- 每步损失（step, epoch, l_vqa, l_reg, l_con, total）
- 每轮指标（train / test 分开记录）
- 评估的每样本选帧、扫描结果表

数值统一格式化为 9 位有效数字，写入经临时文件原子替换；
相同输入两次运行得到逐字节相同的文件。

主要类：
- MetricsWriter: 单一写者的 CSV 表

作者: GCG开发团队
版本: 1.0.0
"""

import csv
import io
from typing import Any, Dict, Iterable, List, Optional, Sequence

from .exceptions import ContractError
from ..utils.file_utils import atomic_write_text

STEP_COLUMNS = ("step", "epoch", "l_vqa", "l_reg", "l_con", "total")
EPOCH_COLUMNS = ("epoch", "split", "l_vqa", "l_reg", "l_con", "total",
                 "recall", "accuracy", "center_error", "pseudo_label_agreement")


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.9g}"
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    return str(value)


class MetricsWriter:
    """
    CSV 指标表

    每次 write_row 后整体重写文件，中途中断也能留下完整的表。
    """

    def __init__(self, path: str, columns: Sequence[str], flush_every: int = 1):
        self.path = path
        self.columns = list(columns)
        self.rows: List[List[str]] = []
        self.flush_every = max(1, flush_every)

    def write_row(self, row: Dict[str, Any]) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise ContractError(f"未知的指标列: {sorted(unknown)}")
        self.rows.append([format_value(row.get(column)) for column in self.columns])
        if len(self.rows) % self.flush_every == 0:
            self.flush()

    def write_rows(self, rows: Iterable[Dict[str, Any]]) -> None:
        for row in rows:
            self.write_row(row)
        self.flush()

    def flush(self) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.rows)
        atomic_write_text(self.path, buffer.getvalue())

    def close(self) -> None:
        self.flush()


def read_metrics(path: str) -> List[Dict[str, str]]:
    """读回 CSV 指标表（测试和扫描汇总使用）"""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def mean_or_none(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(sum(present) / len(present))
