"""
Run Manager for the lattice lab.

CLIの各実行の成果物を管理する:
- タイムスタンプ付き実行ディレクトリの作成（衝突時は _2, _3 … を付ける）
- 実行に使った RunConfig の保存とハッシュ
- info.md による実行情報の記録
"""

from __future__ import annotations

import hashlib
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.core.exceptions import RunManagerError

logger = logging.getLogger(__name__)

CONFIG_FILE_NAME = "config.conf"
INFO_FILE_NAME = "info.md"


def create_run_dir(command: str, base_dir: Path = Path("runs"), now: Optional[datetime] = None) -> Path:
    """
    タイムスタンプ付き実行ディレクトリを作成する。

    Args:
        command: サブコマンド名
        base_dir: 実行履歴を格納する基底ディレクトリ（デフォルト: runs/）
        now: タイムスタンプに使う時刻（テスト用、省略時は現在時刻）

    Returns:
        作成された実行ディレクトリ（例: runs/20261019_123456_equiv/）

    Raises:
        RunManagerError: ディレクトリを作成できない場合
    """
    timestamp = (now or datetime.now()).strftime("%Y%m%d_%H%M%S")
    name = f"{timestamp}_{command}"
    run_dir = Path(base_dir) / name
    suffix = 2
    try:
        Path(base_dir).mkdir(parents=True, exist_ok=True)
        while True:
            try:
                run_dir.mkdir()
                break
            except FileExistsError:
                run_dir = Path(base_dir) / f"{name}_{suffix}"
                suffix += 1
    except OSError as exc:
        raise RunManagerError(f"実行ディレクトリを作成できません: {run_dir}: {exc}") from exc
    logger.debug(f"実行ディレクトリを作成しました: {run_dir}")
    return run_dir


def config_hash(config_text: str) -> str:
    """シリアライズ済み RunConfig の SHA-256。"""
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def save_config(run_dir: Path, config_text: str) -> Path:
    path = run_dir / CONFIG_FILE_NAME
    path.write_text(config_text, encoding="utf-8", newline="\n")
    return path


def file_entries(run_dir: Path, paths: List[Path]) -> List[Dict[str, Any]]:
    """info.md 用の出力ファイル一覧（実行ディレクトリからの相対パスとサイズ）。"""
    entries = []
    for path in paths:
        path = Path(path)
        try:
            relative = path.relative_to(run_dir)
        except ValueError:
            relative = path
        entries.append({"path": str(relative), "size": path.stat().st_size if path.exists() else 0})
    return entries


def save_info_md(run_dir: Path, info: Dict[str, Any]) -> Path:
    """
    info.md を生成する。

    Expected keys in info:
        - execution_id: 実行ID（ディレクトリ名）
        - execution_time: 実行日時
        - command: 実行コマンドライン
        - config_hash: RunConfig の SHA-256
        - seed / dtype: 乱数シードとdtype
        - elapsed_time: 実行時間（秒、オプション）
        - checks: 判定結果（list of {label, passed}、オプション）
        - output_files: 出力ファイル（list of {path, size}、オプション）
    """
    lines = ["# 実行情報", ""]

    lines.append("## 基本情報")
    lines.append(f"- **実行ID**: {info.get('execution_id', 'N/A')}")
    lines.append(f"- **実行日時**: {info.get('execution_time', 'N/A')}")
    lines.append(f"- **実行コマンド**: `{info.get('command', 'N/A')}`")
    lines.append("")

    lines.append("## 設定")
    lines.append(f"- **設定ファイル**: `{CONFIG_FILE_NAME}`")
    lines.append(f"- **SHA-256**: `{info.get('config_hash', 'N/A')}`")
    if "seed" in info:
        lines.append(f"- **seed**: {info['seed']}")
    if "dtype" in info:
        lines.append(f"- **dtype**: {info['dtype']}")
    if "elapsed_time" in info:
        lines.append(f"- **実行時間**: {info['elapsed_time']:.2f}秒")
    lines.append("")

    if info.get("checks"):
        lines.append("## 判定")
        for item in info["checks"]:
            status = "✓" if item["passed"] else "✗"
            lines.append(f"- [{status}] {item['label']}")
        lines.append("")

    if info.get("output_files"):
        lines.append("## 出力ファイル")
        for file_info in info["output_files"]:
            lines.append(f"- `{file_info['path']}` ({file_info['size']} bytes)")
        lines.append("")

    info_path = run_dir / INFO_FILE_NAME
    info_path.write_text("\n".join(lines), encoding="utf-8")
    return info_path
