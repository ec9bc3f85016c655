"""
CSV report writer.

すべてのレポートは同じ規約で書き出す:
- UTF-8、区切りはカンマ、改行は LF
- 先頭行はヘッダー
- 浮動小数点数は "%.10e"（同じ入力から同じバイト列になるように）
- タイムスタンプは内容に含めない（ディレクトリ名にのみ入る）
"""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from src.core.exceptions import ReportError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10e"


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % float(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def render_csv(rows: Iterable[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> str:
    """
    行（辞書）のリストをCSV文字列にする。

    Args:
        rows: 各行の辞書
        columns: 列の順序（省略時は最初の行のキー順）

    Raises:
        ReportError: 行に列が欠けている、または列が1つも決まらない場合
    """
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ReportError("列を決められません（行が空で columns も指定されていません）")
        columns = list(rows[0].keys())
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for index, row in enumerate(rows):
        missing = [column for column in columns if column not in row]
        if missing:
            raise ReportError(f"{index}行目に列がありません: {', '.join(missing)}")
        writer.writerow([format_cell(row[column]) for column in columns])
    return buffer.getvalue()


def write_csv(path: Path, rows: Iterable[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    """CSVを書き出してパスを返す。"""
    path = Path(path)
    text = render_csv(rows, columns)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            handle.write(text)
    except OSError as exc:
        raise ReportError(f"レポートを書き込めません: {path}: {exc}") from exc
    logger.info(f"レポートを書き出しました: {path}")
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


EQUIVALENCE_COLUMNS = ("check", "subject", "shape", "K", "heads", "instance", "max_abs_diff", "tolerance", "status")
GRADCHECK_COLUMNS = ("case", "parameter", "max_rel_err", "max_abs_err", "skipped", "tolerance", "status")
BENCH_COLUMNS = ("variant", "shape", "K", "heads", "repeats", "median_seconds", "best_seconds", "buffer_bytes")
FLOPS_COLUMNS = (
    "architecture", "resolution", "convention", "params", "flops",
    "target_params", "target_flops", "params_deviation", "flops_deviation", "status",
)
TRAIN_COLUMNS = ("step", "loss", "acc", "lr")
PRESET_COLUMNS = ("name", "use_qk", "use_q_rk", "use_rq_k", "use_rb", "norm", "application", "terms", "unstable")
