"""
local-attention-lab用のカスタム例外クラス。

このモジュールでは、カーネル・勾配・モデル・設定まわりのエラーを
明示的に表現するためのカスタム例外クラスを定義しています。
"""

from __future__ import annotations

from typing import Optional


class LatticeLabError(Exception):
    """local-attention-labの基底例外クラス。"""
    pass


class TensorError(LatticeLabError):
    """テンソル演算関連のエラー。"""
    pass


class TensorShapeError(TensorError):
    """形状・次元数が演算の前提を満たさない場合のエラー。"""
    pass


class KernelSizeError(TensorError):
    """カーネルサイズが奇数でない、または1未満の場合のエラー。"""
    pass


class NonFiniteError(TensorError):
    """NaN / Inf を検出した場合のエラー。"""
    pass


class GoldenFormatError(LatticeLabError):
    """ゴールデンテンソルファイルの読み書きに失敗した場合のエラー。"""
    pass


class ParadigmError(LatticeLabError):
    """統一パラダイム演算関連のエラー。"""
    pass


class ParadigmConfigError(ParadigmError):
    """ParadigmConfigの不変条件違反。"""
    pass


class UnknownPresetError(ParadigmError):
    """未知のプリセット名が指定された場合のエラー。"""
    pass


class WindowSizeError(ParadigmError):
    """ウィンドウサイズが特徴マップを割り切れない場合のエラー。"""
    pass


class ElsaError(LatticeLabError):
    """ELSAブロック関連のエラー。"""
    pass


class UnknownVariantError(ElsaError):
    """未知のHadamard attention実装バリアントが指定された場合のエラー。"""
    pass


class GhostHeadError(ElsaError):
    """ghost headのチャネル展開が成立しない場合のエラー。"""
    pass


class GradientError(LatticeLabError):
    """逆伝播関連のエラー。"""
    pass


class TapeCycleError(GradientError):
    """テープのトポロジカル順序が壊れている場合のエラー。"""
    pass


class MissingVJPError(GradientError):
    """演算にvjpが登録されていない場合のエラー。"""
    pass


class SeedShapeError(GradientError):
    """seedの形状が出力と一致しない場合のエラー。"""
    pass


class GradCheckError(GradientError):
    """有限差分チェック中に非有限値が出た場合のエラー。"""
    pass


class ModelError(LatticeLabError):
    """モデル構築・学習関連のエラー。"""
    pass


class ModelConfigError(ModelError):
    """ModelConfigの不変条件違反（ヘッド数とチャネル数の不整合など）。"""
    pass


class UnknownArchitectureError(ModelError):
    """パラメータ/FLOPsカウンタに未知のアーキテクチャ名が渡された場合のエラー。"""
    pass


class TrainingDivergedError(ModelError):
    """学習中に損失が非有限値になった場合のエラー。"""

    def __init__(self, message: str, step: int) -> None:
        super().__init__(message)
        self.step = step


class ConfigError(LatticeLabError):
    """設定ファイルの解析・検証エラー。行番号とキーを保持する。"""

    def __init__(self, message: str, *, line: Optional[int] = None, key: Optional[str] = None) -> None:
        super().__init__(message)
        self.line = line
        self.key = key


class RunManagerError(LatticeLabError):
    """runs/ディレクトリ管理関連のエラー。"""
    pass


class ReportError(LatticeLabError):
    """CSVレポートの書き出しに失敗した場合のエラー。"""
    pass
