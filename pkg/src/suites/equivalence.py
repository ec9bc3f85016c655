"""
Equivalence suite.

2種類のチェックを行う:
- Hadamard attention の実装バリアント同士の比較（StrictUnfold / ShiftConv / MergedConv）
- 統一パラダイムのプリセットと専用実装（dwconv / lsa / dynamic filter / ループ参照）の比較

Production バリアントは意図的に非等価なので、差分を記録するだけで合否には数えない。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.core import elsa, paradigm
from src.core.exceptions import UnknownPresetError
from src.core.tensor import resolve_dtype
from src.utils.config import RunConfig, format_shape
from src.utils.rng import normal, stream

logger = logging.getLogger(__name__)

EQUIVALENT = (elsa.Variant.STRICT_UNFOLD, elsa.Variant.SHIFT_CONV, elsa.Variant.MERGED_CONV)
DEGENERACY_LIMIT = (2, 8, 8, 8)
NOT_EQUIVALENT = "not equivalent (by design)"

DEFAULT_TOLERANCE = {"f64": 1e-10, "f32": 1e-5}


@dataclass
class EquivalenceRow:
    check: str
    subject: str
    shape: str
    kernel_size: int
    heads: int
    instance: int
    max_abs_diff: float
    tolerance: float
    status: str

    @property
    def failed(self) -> bool:
        return self.status == "fail"

    def as_dict(self) -> Dict[str, object]:
        return {
            "check": self.check,
            "subject": self.subject,
            "shape": self.shape,
            "K": self.kernel_size,
            "heads": self.heads,
            "instance": self.instance,
            "max_abs_diff": self.max_abs_diff,
            "tolerance": self.tolerance,
            "status": self.status,
        }


@dataclass
class EquivalenceResult:
    rows: List[EquivalenceRow] = field(default_factory=list)

    @property
    def failures(self) -> List[EquivalenceRow]:
        return [row for row in self.rows if row.failed]

    @property
    def passed(self) -> bool:
        return not self.failures


def tolerance_for(cfg: RunConfig) -> float:
    return cfg.tolerance if cfg.tolerance is not None else DEFAULT_TOLERANCE[cfg.dtype]


def _status(diff: float, tolerance: float) -> str:
    return "pass" if diff <= tolerance else "fail"


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

def compare_variants(
    shape: Tuple[int, int, int, int],
    kernel_size: int,
    heads: int,
    variants: List[elsa.Variant],
    seed: int,
    dtype: str,
    tolerance: float,
) -> List[EquivalenceRow]:
    """1つの (shape, K, G) で各バリアントの Hadamard attention を比較する。"""
    B, C, H, W = shape
    dt = resolve_dtype(dtype)
    label = format_shape(shape)
    rng = stream(seed, f"equiv.variants.{label}.{kernel_size}.{heads}")
    params = elsa.init_elsa_params(C, heads, kernel_size, rng, dtype=dt)
    # 初期値 std 0.02 のままではロジットがほぼ一様になるので標準正規に置き換える
    params = params.with_params({
        "r_k_h": normal(rng, params.r_k_h.shape, dtype=dt),
        "r_q_h": normal(rng, params.r_q_h.shape, dtype=dt),
        "r_b_h": normal(rng, params.r_b_h.shape, dtype=dt),
    })
    q = normal(rng, shape, dtype=dt)
    k = normal(rng, shape, dtype=dt)
    maps = {variant: elsa.hadamard_attention(q, k, params, variant).values for variant in variants}

    rows: List[EquivalenceRow] = []
    present = [variant for variant in EQUIVALENT if variant in maps]
    for left, right in combinations(present, 2):
        diff = _max_abs(maps[left], maps[right])
        rows.append(EquivalenceRow(
            "variant", f"{left.value}~{right.value}", label, kernel_size, heads, 0, diff, tolerance, _status(diff, tolerance)
        ))
    if elsa.Variant.PRODUCTION in maps and present:
        diff = _max_abs(maps[elsa.Variant.PRODUCTION], maps[present[0]])
        rows.append(EquivalenceRow(
            "variant", f"{elsa.Variant.PRODUCTION.value}~{present[0].value}", label, kernel_size, heads, 0,
            diff, tolerance, NOT_EQUIVALENT,
        ))
    return rows


# ---------------------------------------------------------------------------
# paradigm degeneracy
# ---------------------------------------------------------------------------

def _dedicated(name: str, cfg: paradigm.ParadigmConfig) -> Tuple[str, Callable]:
    """プリセットに対応する専用実装（比較相手）の名前と関数。"""
    if name == "DwConv":
        def run_dwconv(q, k, v, tables):
            K = cfg.application.size
            return paradigm.dwconv_forward(v, tables.r_b.reshape(cfg.channels, K, K))

        return "dwconv_forward", run_dwconv
    if name == "SwinLSA":
        def run_lsa(q, k, v, tables):
            return paradigm.lsa_forward(q, k, v, tables.r_b, cfg.application.size, cfg.qk_scale)

        return "lsa_forward", run_lsa
    if name == "InvolutionLike":
        def run_dynamic(q, k, v, tables):
            return paradigm.dynamic_filter_reference(q, v, tables.r_k, cfg.application.size)

        return "dynamic_filter_reference", run_dynamic

    def run_reference(q, k, v, tables):
        return paradigm.unified_reference(q, k, v, tables, cfg)

    return "unified_reference", run_reference


def _window_size(height: int, width: int, limit: int) -> int:
    common = math.gcd(height, width)
    return max(d for d in range(1, min(common, limit) + 1) if common % d == 0)


def _preset_size(name: str, shape: Tuple[int, int, int, int], kernel_size: int) -> int:
    if paradigm.PRESETS[name].mode is paradigm.ApplicationMode.WINDOW:
        return _window_size(shape[2], shape[3], kernel_size)
    return kernel_size


def _random_tables(cfg: paradigm.ParadigmConfig, rng: np.random.Generator, dtype) -> paradigm.RelPosTables:
    d, G, table = cfg.head_dim, cfg.heads, cfg.table_size
    return paradigm.RelPosTables(
        r_k=normal(rng, (d, G, table), dtype=dtype) if cfg.use_q_rk else None,
        r_q=normal(rng, (d, G, table), dtype=dtype) if cfg.use_rq_k else None,
        r_b=normal(rng, (G, table), dtype=dtype) if cfg.use_rb else None,
    )


def degeneracy_shapes(cfg: RunConfig) -> List[Tuple[int, int, int, int]]:
    return [shape for shape in cfg.shape_tuples if all(a <= b for a, b in zip(shape, DEGENERACY_LIMIT))]


def compare_preset(
    name: str,
    shape: Tuple[int, int, int, int],
    kernel_size: int,
    heads: int,
    instance: int,
    seed: int,
    dtype: str,
    tolerance: float,
) -> Optional[EquivalenceRow]:
    B, C, H, W = shape
    if C % heads:
        return None
    dt = resolve_dtype(dtype)
    size = _preset_size(name, shape, kernel_size)
    cfg = paradigm.preset(name, channels=C, heads=heads, size=size)
    label = format_shape(shape)
    rng = stream(seed, f"equiv.preset.{name}.{label}.{kernel_size}.{heads}.{instance}")
    tables = _random_tables(cfg, rng, dt)
    q, k, v = (normal(rng, shape, dtype=dt) for _ in range(3))
    dedicated_name, dedicated = _dedicated(name, cfg)
    fast = paradigm.unified_forward(q, k, v, tables, cfg)
    expected = dedicated(q, k, v, tables)
    diff = _max_abs(fast, expected)
    return EquivalenceRow(
        "degeneracy", f"{name}~{dedicated_name}", label, size, cfg.heads, instance, diff, tolerance, _status(diff, tolerance)
    )


def run_equivalence(cfg: RunConfig) -> EquivalenceResult:
    """
    equivコマンドの本体。

    Args:
        cfg: RunConfig（shapes, kernel_sizes, heads, variants, presets, instances, tolerance）

    Returns:
        EquivalenceResult
    """
    tolerance = tolerance_for(cfg)
    variants = [elsa.resolve_variant(name) for name in cfg.variants]
    result = EquivalenceResult()

    for shape in cfg.shape_tuples:
        for K in cfg.kernel_sizes:
            for G in cfg.heads:
                if shape[1] % G:
                    logger.debug(f"スキップ: ヘッド数 {G} がチャネル数 {shape[1]} を割り切りません")
                    continue
                result.rows.extend(compare_variants(shape, K, G, variants, cfg.seed, cfg.dtype, tolerance))

    shapes = degeneracy_shapes(cfg)
    if cfg.presets and not shapes:
        logger.warning(f"プリセット比較に使える形状（≤ {format_shape(DEGENERACY_LIMIT)}）がありません")
    for name in cfg.presets:
        if name not in paradigm.PRESETS:
            raise UnknownPresetError(f"未知のプリセットです: {name}")
        for shape in shapes:
            for K in cfg.kernel_sizes:
                for G in cfg.heads:
                    for instance in range(cfg.instances):
                        row = compare_preset(name, shape, K, G, instance, cfg.seed, cfg.dtype, tolerance)
                        if row is not None:
                            result.rows.append(row)

    for row in result.failures:
        logger.warning(f"不一致: {row.check} {row.subject} {row.shape} K={row.kernel_size} G={row.heads}: {row.max_abs_diff:.3e}")
    return result
