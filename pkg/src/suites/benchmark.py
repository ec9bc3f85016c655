"""
Micro-benchmark of the Hadamard-attention variants.

各 (variant, shape, K) について1回ウォームアップしてから repeats 回計測し、中央値を報告する。
一時バッファのバイト数は実行せずに形状から解析的に求める。
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from src.core import elsa
from src.core.exceptions import ConfigError
from src.core.tensor import element_size, resolve_dtype
from src.utils.config import RunConfig, format_shape
from src.utils.rng import normal, stream

logger = logging.getLogger(__name__)

MIN_REPEATS = 3


@dataclass
class Timing:
    """計測値（秒）の集まり。"""

    samples: List[float] = field(default_factory=list)

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def best(self) -> float:
        return min(self.samples)


def transient_buffer_bytes(variant: elsa.Variant, shape: Tuple[int, int, int, int], kernel_size: int, heads: int, dtype) -> int:
    """
    バリアントが作る最大の一時バッファのバイト数。

    - StrictUnfold: unfold(q⊙k) の B·C·K²·H·W
    - ShiftConv: シフト前の r^q 縮約 B·G·K²·H·W
    - MergedConv / Production: 融合縮約 B·2G·K²·H·W
    """
    B, C, H, W = shape
    taps = kernel_size * kernel_size
    elem = element_size(dtype)
    if variant is elsa.Variant.STRICT_UNFOLD:
        return B * C * taps * H * W * elem
    if variant is elsa.Variant.SHIFT_CONV:
        return B * heads * taps * H * W * elem
    return B * 2 * heads * taps * H * W * elem


@dataclass
class BenchRow:
    variant: str
    shape: str
    kernel_size: int
    heads: int
    repeats: int
    median_seconds: float
    best_seconds: float
    buffer_bytes: int

    def as_dict(self) -> Dict[str, object]:
        return {
            "variant": self.variant,
            "shape": self.shape,
            "K": self.kernel_size,
            "heads": self.heads,
            "repeats": self.repeats,
            "median_seconds": self.median_seconds,
            "best_seconds": self.best_seconds,
            "buffer_bytes": self.buffer_bytes,
        }


def time_call(fn, repeats: int) -> Timing:
    fn()
    timing = Timing()
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timing.samples.append(time.perf_counter() - start)
    return timing


def run_benchmark(cfg: RunConfig) -> List[BenchRow]:
    """
    benchコマンドの本体。ヘッド数はcfg.headsのうちチャネル数を割り切るものを使う。

    Raises:
        ConfigError: repeats が3未満の場合
    """
    if cfg.repeats < MIN_REPEATS:
        raise ConfigError(f"repeats は{MIN_REPEATS}以上である必要があります: {cfg.repeats}", key="repeats")
    dtype = resolve_dtype(cfg.dtype)
    variants = [elsa.resolve_variant(name) for name in cfg.variants]
    rows: List[BenchRow] = []
    for shape in cfg.shape_tuples:
        C = shape[1]
        heads = next((G for G in cfg.heads if C % G == 0), 1)
        label = format_shape(shape)
        for K in cfg.kernel_sizes:
            rng = stream(cfg.seed, f"bench.{label}.{K}")
            params = elsa.init_elsa_params(C, heads, K, rng, dtype=dtype)
            q = normal(rng, shape, dtype=dtype)
            k = normal(rng, shape, dtype=dtype)
            for variant in variants:
                timing = time_call(lambda: elsa.hadamard_attention(q, k, params, variant), cfg.repeats)
                row = BenchRow(
                    variant=variant.value,
                    shape=label,
                    kernel_size=K,
                    heads=heads,
                    repeats=cfg.repeats,
                    median_seconds=timing.median,
                    best_seconds=timing.best,
                    buffer_bytes=transient_buffer_bytes(variant, shape, K, heads, dtype),
                )
                logger.info(f"{row.variant:<13} {label} K={K}: median {row.median_seconds * 1e3:.2f} ms, buffer {row.buffer_bytes:,} B")
                rows.append(row)
    return rows
