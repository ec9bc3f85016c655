"""
Finite-difference gradient verification.

解析勾配（テープ + vjp）と中心差分
    (f(θ + h·e_i) − f(θ − h·e_i)) / (2h),  h = step·max(1, |θ_i|)
を要素ごとに比較し、パラメータ単位の GradReport にまとめる。
数値微分側は常にf64で評価する。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from src.core.autograd import value_and_grad
from src.core.exceptions import GradCheckError, GradientError
from src.core.ops import value_of

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
NEAR_ZERO_RADIUS = 1e-3


@dataclass
class GradEntry:
    """1パラメータ分の比較結果。"""

    parameter: str
    max_rel_err: float
    max_abs_err: float
    step: float
    checked: int
    skipped: int = 0


@dataclass
class GradReport:
    """fd_checkの結果。entriesはパラメータ名順。"""

    entries: List[GradEntry] = field(default_factory=list)
    label: str = ""

    @property
    def max_rel_err(self) -> float:
        return max((entry.max_rel_err for entry in self.entries), default=0.0)

    @property
    def max_abs_err(self) -> float:
        return max((entry.max_abs_err for entry in self.entries), default=0.0)

    @property
    def skipped(self) -> int:
        return sum(entry.skipped for entry in self.entries)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err <= tolerance

    def entry(self, parameter: str) -> GradEntry:
        for candidate in self.entries:
            if candidate.parameter == parameter:
                return candidate
        raise KeyError(parameter)


def near_zero_mask(values: np.ndarray, radius: float = NEAR_ZERO_RADIUS) -> np.ndarray:
    """微分不能点（0）の近傍を示すマスク。spowのλ<1で使う。"""
    return np.abs(values) < radius


def _scalar(value) -> float:
    array = np.asarray(value_of(value))
    if array.size != 1:
        raise GradientError(f"fd_checkの関数はスカラーを返す必要があります: {array.shape}")
    result = float(array.reshape(()))
    if not np.isfinite(result):
        raise GradCheckError(f"関数値が非有限です: {result}")
    return result


def fd_check(
    f: Callable[[Dict[str, object]], object],
    params: Mapping[str, np.ndarray],
    step: float = DEFAULT_STEP,
    analytic_dtype=np.float64,
    skip: Optional[Mapping[str, np.ndarray]] = None,
    label: str = "",
) -> GradReport:
    """
    解析勾配を中心差分と比較する。

    Args:
        f: パラメータ辞書（numpy配列またはVar）を受け取りスカラーを返す関数
        params: パラメータ名 → 値
        step: 相対差分ステップ
        analytic_dtype: 解析勾配を計算するdtype（f32の順伝播を検証する場合はnp.float32）
        skip: パラメータ名 → 真の要素を比較から除外するブールマスク
        label: レポートに付けるラベル

    Returns:
        GradReport

    Raises:
        GradCheckError: 関数値が非有限になった場合
    """
    skip = skip or {}
    analytic_params = {name: np.asarray(value, dtype=analytic_dtype) for name, value in params.items()}
    base_value, analytic = value_and_grad(f, analytic_params)
    if not np.isfinite(base_value):
        raise GradCheckError(f"関数値が非有限です: {base_value}")

    theta = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    report = GradReport(label=label)
    for name in sorted(theta):
        values = theta[name]
        grad = np.asarray(analytic[name], dtype=np.float64)
        mask = np.asarray(skip.get(name, np.zeros(values.shape, dtype=bool)), dtype=bool)
        flat = values.reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        max_step = 0.0
        checked = 0
        for index in range(flat.size):
            if mask.reshape(-1)[index]:
                continue
            original = flat[index]
            h = step * max(1.0, abs(original))
            flat[index] = original + h
            plus = _scalar(f(theta))
            flat[index] = original - h
            minus = _scalar(f(theta))
            flat[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[index]
            abs_err = abs(exact - numeric)
            rel_err = abs_err / max(1.0, abs(exact), abs(numeric))
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            max_step = max(max_step, h)
            checked += 1
        skipped = int(mask.sum())
        if skipped:
            logger.warning(f"{label or 'fd_check'}: {name} の {skipped} 要素を微分不能点の近傍としてスキップしました")
        report.entries.append(
            GradEntry(parameter=name, max_rel_err=max_rel, max_abs_err=max_abs, step=max_step, checked=checked, skipped=skipped)
        )
    logger.debug(f"{label or 'fd_check'}: max_rel_err={report.max_rel_err:.3e}")
    return report
