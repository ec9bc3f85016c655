"""
Command-line interface for the local attention lab.

使用例:
    python -m src.cli equiv
    python -m src.cli equiv --dtype f64 --tolerance 0
    python -m src.cli gradcheck --config samples/configs/gradcheck_default.conf
    python -m src.cli bench --repeats 5
    python -m src.cli flops --set architectures=[SwinT_ELSA]
    python -m src.cli train --config samples/configs/train_elsa_tiny.conf
    python -m src.cli presets

各実行は <out>/<YYYYmmdd_HHMMSS>_<command>/ に config.conf・CSVレポート・info.md を書き出す。
終了コードは、そのコマンドのすべての判定が通れば0、それ以外は1。
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from src.core import paradigm
from src.core.exceptions import ConfigError, LatticeLabError
from src.model.counter import TARGETS, count_params_flops
from src.model.dataset import SyntheticDataset
from src.model.network import ModelConfig, build_model, tiny_config
from src.model.training import TrainConfig, train
from src.reports import csv_report
from src.suites.benchmark import run_benchmark
from src.suites.equivalence import NOT_EQUIVALENT, run_equivalence, tolerance_for
from src.suites.gradcheck_suite import run_gradcheck
from src.utils import run_manager
from src.utils.config import (
    RunConfig,
    apply_override,
    default_run_config,
    env_defaults,
    load_config_file,
)

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_SAMPLES = 2048


@dataclass
class CommandOutcome:
    """サブコマンドの結果。checks は info.md の判定欄になる。"""

    exit_code: int = 0
    output_files: List[Path] = field(default_factory=list)
    checks: List[Dict[str, Any]] = field(default_factory=list)

    def check(self, label: str, passed: bool) -> None:
        self.checks.append({"label": label, "passed": bool(passed)})
        if not passed:
            self.exit_code = 1


# ---------------------------------------------------------------------------
# config assembly
# ---------------------------------------------------------------------------

def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """明示的に指定されたフラグだけを、同じ名前の設定キーへの上書きにする。"""
    overrides: Dict[str, Any] = {}
    for key in ("seed", "dtype", "out", "tolerance", "repeats", "instances", "resolution", "flop_convention"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for key in ("steps", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.setdefault("train", {})[key] = value
    return overrides


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """
    デフォルト < 環境変数 < 設定ファイル < CLIフラグ の順に重ねてRunConfigを作る。

    Raises:
        ConfigError: 設定ファイルの構文エラー、スキーマ違反、コマンド不一致
    """
    document = _merge(default_run_config(args.command), env_defaults())
    lines: Dict[str, int] = {}
    if args.config:
        file_document, lines = load_config_file(args.config)
        file_command = file_document.get("command", args.command)
        if file_command != args.command:
            raise ConfigError(
                f"設定ファイルのcommand（{file_command}）とサブコマンド（{args.command}）が一致しません",
                line=lines.get("command"),
                key="command",
            )
        document = _merge(document, file_document)
    document = _merge(document, _flag_overrides(args))
    for assignment in args.set or []:
        apply_override(document, assignment)
    return RunConfig.from_dict(document, lines=lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_equiv(cfg: RunConfig, run_dir: Path) -> CommandOutcome:
    outcome = CommandOutcome()
    result = run_equivalence(cfg)
    path = csv_report.write_csv(run_dir / "equivalence.csv", [row.as_dict() for row in result.rows], csv_report.EQUIVALENCE_COLUMNS)
    outcome.output_files.append(path)
    tolerance = tolerance_for(cfg)
    checked = [row for row in result.rows if row.status != NOT_EQUIVALENT]
    for row in result.failures:
        print(f"✗ {row.check} {row.subject} {row.shape} K={row.kernel_size}: max|Δ|={row.max_abs_diff:.3e} > {tolerance:.1e}")
    outcome.check(f"等価性チェック {len(checked) - len(result.failures)}/{len(checked)} 件が許容誤差 {tolerance:.1e} 以内", result.passed)
    if result.passed:
        print(f"✓ 等価性チェック: {len(checked)}件すべて許容誤差 {tolerance:.1e} 以内")
    return outcome


def cmd_gradcheck(cfg: RunConfig, run_dir: Path) -> CommandOutcome:
    outcome = CommandOutcome()
    result = run_gradcheck(cfg)
    path = csv_report.write_csv(run_dir / "gradcheck.csv", result.rows(), csv_report.GRADCHECK_COLUMNS)
    outcome.output_files.append(path)
    for name in result.failures:
        print(f"✗ 勾配チェック失敗: {name}")
    outcome.check(f"勾配チェック {len(result.reports) - len(result.failures)}/{len(result.reports)} ケース", result.passed)
    if result.passed:
        print(f"✓ 勾配チェック: {len(result.reports)}ケースすべて合格")
    return outcome


def cmd_bench(cfg: RunConfig, run_dir: Path) -> CommandOutcome:
    outcome = CommandOutcome()
    rows = run_benchmark(cfg)
    path = csv_report.write_csv(run_dir / "bench.csv", [row.as_dict() for row in rows], csv_report.BENCH_COLUMNS)
    outcome.output_files.append(path)
    print(f"✓ ベンチマーク: {len(rows)}行を書き出しました")
    return outcome


def cmd_flops(cfg: RunConfig, run_dir: Path) -> CommandOutcome:
    outcome = CommandOutcome()
    subjects: List[Any] = list(cfg.architectures)
    if cfg.model:
        subjects.append(ModelConfig.from_dict(cfg.model))
    rows = []
    for subject in subjects:
        name = subject if isinstance(subject, str) else "custom"
        counts = count_params_flops(subject, resolution=cfg.resolution, convention=cfg.flop_convention)
        deviation = counts.deviation(name)
        within = counts.within_target(name)
        target = TARGETS.get(name) if deviation is not None else None
        rows.append({
            "architecture": name,
            "resolution": counts.resolution,
            "convention": counts.convention,
            "params": counts.params,
            "flops": counts.flops,
            "target_params": target[0] if target else None,
            "target_flops": target[1] if target else None,
            "params_deviation": deviation[0] if deviation else None,
            "flops_deviation": deviation[1] if deviation else None,
            "status": "n/a" if within is None else ("pass" if within else "fail"),
        })
        summary = f"{name}: params {counts.params / 1e6:.2f}M, FLOPs {counts.flops / 1e9:.2f}G ({counts.convention}, {counts.resolution}px)"
        if within is None:
            print(f"  {summary}")
        else:
            mark = "✓" if within else "✗"
            print(f"{mark} {summary} / 公開値との差 params {deviation[0]:.1%}, FLOPs {deviation[1]:.1%}")
            outcome.check(f"{name} が公開値の許容範囲内", within)
    path = csv_report.write_csv(run_dir / "flops.csv", rows, csv_report.FLOPS_COLUMNS)
    outcome.output_files.append(path)
    return outcome


def cmd_train(cfg: RunConfig, run_dir: Path) -> CommandOutcome:
    outcome = CommandOutcome()
    train_section = dict(cfg.train)
    target_accuracy = train_section.pop("target_accuracy", None)
    train_section.setdefault("seed", cfg.seed)
    train_cfg = TrainConfig.from_dict(train_section)
    model_cfg = ModelConfig.from_dict(cfg.model) if cfg.model else tiny_config("ELSA")
    dataset = SyntheticDataset(
        seed=cfg.dataset.get("seed", cfg.seed),
        n=cfg.dataset.get("n", DEFAULT_TRAIN_SAMPLES),
        noise=cfg.dataset.get("noise", 0.1),
        image_size=model_cfg.image_size,
        dtype=cfg.dtype,
    )
    model = build_model(model_cfg, seed=cfg.seed, dtype=cfg.dtype)
    logger.info(f"モデルを構築しました: {model.param_count:,} パラメータ, データ {len(dataset)} 件")
    log = train(model, dataset, train_cfg)
    path = csv_report.write_csv(run_dir / "train_log.csv", log.rows(), csv_report.TRAIN_COLUMNS)
    outcome.output_files.append(path)
    if log.diverged:
        print(f"✗ 学習が発散しました（step {log.diverged_step}）")
    else:
        print(f"✓ 学習完了: 最終損失 {log.losses[-1]:.4f}, 精度 {log.final_accuracy:.3f}")
    if target_accuracy is not None:
        reached = not log.diverged and log.final_accuracy is not None and log.final_accuracy >= target_accuracy
        outcome.check(f"最終精度が目標 {target_accuracy:.2f} 以上", reached)
    return outcome


def cmd_presets(cfg: RunConfig, run_dir: Path) -> CommandOutcome:
    outcome = CommandOutcome()
    rows = paradigm.preset_table_rows()
    sys.stdout.write(csv_report.render_csv(rows, csv_report.PRESET_COLUMNS))
    outcome.output_files.append(csv_report.write_csv(run_dir / "presets.csv", rows, csv_report.PRESET_COLUMNS))
    return outcome


COMMAND_HANDLERS: Dict[str, Callable[[RunConfig, Path], CommandOutcome]] = {
    "equiv": cmd_equiv,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "train": cmd_train,
    "presets": cmd_presets,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="乱数シード")
    common.add_argument("--dtype", choices=["f32", "f64"], help="計算精度")
    common.add_argument("--out", help="実行ディレクトリの基底（デフォルト: runs）")
    common.add_argument("--config", type=Path, help="設定ファイル（dotted.key = value 形式）")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="任意の設定キーを上書き（複数指定可）")
    common.add_argument("--debug", action="store_true", help="デバッグログを有効化")

    parser = argparse.ArgumentParser(
        description="局所空間処理（窓/近傍attention・動的フィルタ・ELSA）の検証ラボ",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    equiv = sub.add_parser("equiv", parents=[common], help="実装バリアントとプリセットの等価性チェック")
    equiv.add_argument("--tolerance", type=float, help="最大絶対誤差の許容値")
    equiv.add_argument("--instances", type=int, help="縮退チェックのランダムインスタンス数")

    sub.add_parser("gradcheck", parents=[common], help="有限差分による勾配チェック")

    bench = sub.add_parser("bench", parents=[common], help="Hadamard attention バリアントの計測")
    bench.add_argument("--repeats", type=int, help="計測回数（3以上）")

    flops = sub.add_parser("flops", parents=[common], help="パラメータ数とFLOPsの解析的カウント")
    flops.add_argument("--resolution", type=int, help="入力解像度")
    flops.add_argument("--flop-convention", dest="flop_convention", choices=["mac", "2mac"], help="FLOPの数え方")

    train_parser = sub.add_parser("train", parents=[common], help="合成データでの学習デモ")
    train_parser.add_argument("--steps", type=int, help="学習ステップ数")
    train_parser.add_argument("--lr", type=float, help="学習率")

    sub.add_parser("presets", parents=[common], help="プリセット表をCSVで表示")
    return parser


def _log_level(debug: bool) -> int:
    if debug:
        return logging.DEBUG
    name = os.getenv("LATTICE_LOG_LEVEL", "").strip().upper()
    return getattr(logging, name, logging.INFO) if name else logging.INFO


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=_log_level(args.debug), format="[%(levelname)s] %(message)s")

    try:
        cfg = build_run_config(args)
        run_dir = run_manager.create_run_dir(cfg.command, base_dir=Path(cfg.out))
        config_text = cfg.to_text()
        config_path = run_manager.save_config(run_dir, config_text)
        logger.info(f"実行ディレクトリ: {run_dir}")

        start_time = time.time()
        outcome = COMMAND_HANDLERS[cfg.command](cfg, run_dir)
        elapsed_time = time.time() - start_time

        command_line = " ".join(sys.argv) if argv is None else " ".join(["python -m src.cli", *argv])
        info = {
            "execution_id": run_dir.name,
            "execution_time": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "command": command_line,
            "config_hash": run_manager.config_hash(config_text),
            "seed": cfg.seed,
            "dtype": cfg.dtype,
            "elapsed_time": elapsed_time,
            "checks": outcome.checks,
            "output_files": run_manager.file_entries(run_dir, [config_path, *outcome.output_files]),
        }
        run_manager.save_info_md(run_dir, info)
        logger.info(f"実行時間: {elapsed_time:.2f}秒")
        return outcome.exit_code

    except LatticeLabError as e:
        logger.error(f"エラーが発生しました: {e}", exc_info=args.debug)
        return 1


if __name__ == "__main__":
    sys.exit(main())
