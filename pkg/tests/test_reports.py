"""
CSVレポートのテスト。
"""

from __future__ import annotations

import numpy as np
import pytest

from src.core.exceptions import ReportError
from src.reports.csv_report import TRAIN_COLUMNS, format_cell, read_csv, render_csv, write_csv


@pytest.mark.parametrize(
    "value,expected",
    [
        (0.001, "1.0000000000e-03"),
        (np.float32(0.5), "5.0000000000e-01"),
        (True, "true"),
        (np.bool_(False), "false"),
        (np.int64(42), "42"),
        (None, ""),
        ("pass", "pass"),
    ],
)
def test_format_cell(value, expected) -> None:
    assert format_cell(value) == expected


def test_render_uses_lf_and_column_order() -> None:
    rows = [{"lr": 0.1, "step": 0, "loss": 2.0, "acc": 0.25}]
    text = render_csv(rows, TRAIN_COLUMNS)

    assert text == "step,loss,acc,lr\n0,2.0000000000e+00,2.5000000000e-01,1.0000000000e-01\n"
    assert "\r" not in text


def test_render_defaults_to_first_row_keys() -> None:
    assert render_csv([{"b": 1, "a": "x"}]).splitlines()[0] == "b,a"


def test_missing_column() -> None:
    with pytest.raises(ReportError):
        render_csv([{"step": 0}], TRAIN_COLUMNS)


def test_empty_rows_need_columns() -> None:
    with pytest.raises(ReportError):
        render_csv([])
    assert render_csv([], ("a", "b")) == "a,b\n"


def test_write_and_read(tmp_path) -> None:
    path = write_csv(tmp_path / "sub" / "train_log.csv", [{"step": 1, "loss": 0.5, "acc": 1.0, "lr": 0.0}], TRAIN_COLUMNS)

    assert path.read_bytes().count(b"\n") == 2
    assert read_csv(path) == [{"step": "1", "loss": "5.0000000000e-01", "acc": "1.0000000000e+00", "lr": "0.0000000000e+00"}]


def test_same_rows_same_bytes(tmp_path) -> None:
    rows = [{"x": 1 / 3, "y": "a,b"}]
    first = write_csv(tmp_path / "a.csv", rows).read_bytes()
    second = write_csv(tmp_path / "b.csv", rows).read_bytes()
    assert first == second
    assert b'"a,b"' in first
