"""
Tests for run directory management and info.md generation.
"""

from __future__ import annotations

from datetime import datetime

from src.utils.run_manager import config_hash, create_run_dir, file_entries, save_config, save_info_md

FIXED = datetime(2026, 10, 19, 12, 34, 56)


def test_run_dir_name_and_collision(tmp_path) -> None:
    first = create_run_dir("equiv", base_dir=tmp_path, now=FIXED)
    second = create_run_dir("equiv", base_dir=tmp_path, now=FIXED)
    third = create_run_dir("equiv", base_dir=tmp_path, now=FIXED)

    assert first.name == "20261019_123456_equiv"
    assert second.name == "20261019_123456_equiv_2"
    assert third.name == "20261019_123456_equiv_3"
    assert all(path.is_dir() for path in (first, second, third))


def test_base_dir_is_created(tmp_path) -> None:
    run_dir = create_run_dir("flops", base_dir=tmp_path / "nested" / "runs", now=FIXED)
    assert run_dir.parent == tmp_path / "nested" / "runs"


def test_config_hash_is_stable() -> None:
    digest = config_hash("command = equiv\n")
    assert digest == config_hash("command = equiv\n")
    assert digest != config_hash("command = bench\n")
    assert len(digest) == 64


def test_save_config_uses_lf(tmp_path) -> None:
    path = save_config(tmp_path, "command = equiv\nseed = 0\n")
    assert path.name == "config.conf"
    assert path.read_bytes() == b"command = equiv\nseed = 0\n"


def test_info_md_contents(tmp_path) -> None:
    report = tmp_path / "equivalence.csv"
    report.write_text("check,status\n", encoding="utf-8")

    path = save_info_md(tmp_path, {
        "execution_id": tmp_path.name,
        "execution_time": "2026-10-19 12:34:56",
        "command": "python -m src.cli equiv",
        "config_hash": "abc123",
        "seed": 0,
        "dtype": "f64",
        "elapsed_time": 1.5,
        "checks": [{"label": "variants", "passed": True}, {"label": "presets", "passed": False}],
        "output_files": file_entries(tmp_path, [report]),
    })

    content = path.read_text(encoding="utf-8")
    assert "# 実行情報" in content
    assert "`python -m src.cli equiv`" in content
    assert "`abc123`" in content
    assert "1.50秒" in content
    assert "- [✓] variants" in content
    assert "- [✗] presets" in content
    assert "`equivalence.csv` (13 bytes)" in content


def test_info_md_minimal(tmp_path) -> None:
    content = save_info_md(tmp_path, {}).read_text(encoding="utf-8")
    assert "N/A" in content
    assert "## 判定" not in content
    assert "## 出力ファイル" not in content
