"""
Analytic parameter and FLOP counter.

パラメータ数は param_specs のテンソル形状から数えるので build_model と必ず一致する。
FLOPs は層ごとに積和回数を積み上げる:

- mac: 1回の積和を1 FLOPと数える（公開表の慣習）
- 2mac: 積和を2 FLOPと数える

softmax / 正規化そのもののコストは数えない。LayerNorm は HW·C として数える。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple, Union

from src.core.exceptions import ModelConfigError, UnknownArchitectureError
from src.model.network import ModelConfig, StageConfig, param_specs, swin_t_config, unified_config

logger = logging.getLogger(__name__)

CONVENTIONS = ("mac", "2mac")
ARCHITECTURES = ("SwinT_LSA", "SwinT_ELSA", "SwinT_ELSA_HA_only", "SwinT_DwConv")

# 公開値 (params, FLOPs@224)。FLOPsは積和1回を1と数えた値で、2mac で数えるとほぼ2倍になり比較できない
TARGETS: Dict[str, Tuple[float, float]] = {
    "SwinT_LSA": (28.3e6, 4.5e9),
    "SwinT_ELSA": (29.1e6, 4.8e9),
    "SwinT_ELSA_HA_only": (29.0e6, 4.7e9),
    "SwinT_DwConv": (24.0e6, 3.7e9),
}
PARAM_TOLERANCE = 0.03
FLOP_TOLERANCE = 0.10


@dataclass
class Counts:
    params: int
    flops: int
    convention: str = "mac"
    resolution: int = 224
    breakdown: Dict[str, int] = field(default_factory=dict)

    def deviation(self, name: str) -> Optional[Tuple[float, float]]:
        """公開値に対する相対誤差 (params, flops)。対象外ならNone。"""
        target = TARGETS.get(name)
        if target is None or self.convention != "mac" or self.resolution != 224:
            return None
        return abs(self.params - target[0]) / target[0], abs(self.flops - target[1]) / target[1]

    def within_target(self, name: str) -> Optional[bool]:
        deviation = self.deviation(name)
        if deviation is None:
            return None
        return deviation[0] <= PARAM_TOLERANCE and deviation[1] <= FLOP_TOLERANCE


def named_architecture(name: str) -> ModelConfig:
    try:
        return swin_t_config(name)
    except KeyError:
        raise UnknownArchitectureError(f"未知のアーキテクチャです: {name}（候補: {', '.join(ARCHITECTURES)}）") from None


def _mixer_macs(stage: StageConfig, cfg: ModelConfig, hw: int) -> int:
    C, K = stage.channels, stage.window_or_kernel
    if stage.mixer == "LSA":
        window = K * K
        return 3 * hw * C * C + 2 * hw * window * C + hw * C * C
    if stage.mixer == "DwConv":
        return 2 * hw * C * C + hw * C * K * K
    if stage.mixer == "Unified":
        pcfg = unified_config(stage)
        taps = pcfg.application.filter_elements
        terms = sum(1 for flag in (pcfg.use_qk, pcfg.use_q_rk, pcfg.use_rq_k) if flag)
        return 4 * hw * C * C + terms * hw * taps * C + hw * taps * C
    taps = K * K
    tables = 2 * hw * C * taps
    if not stage.elsa_grouped:
        tables *= stage.heads
    ghost = hw * C * taps if cfg.ghost else 0
    return 4 * hw * C * C + hw * C + tables + ghost + hw * C * taps


def _macs(cfg: ModelConfig) -> Dict[str, int]:
    stages = cfg.resolved_stages()
    breakdown: Dict[str, int] = {}
    size = cfg.stage_resolution(0)
    hw = size * size
    first = stages[0].channels
    breakdown["patch_embed"] = hw * first * cfg.in_channels * cfg.patch_size ** 2 + hw * first
    for s, stage in enumerate(stages):
        size = cfg.stage_resolution(s)
        hw = size * size
        C = stage.channels
        block = 2 * hw * C + _mixer_macs(stage, cfg, hw) + 2 * cfg.mlp_ratio * hw * C * C
        breakdown[f"stages.{s}.blocks"] = stage.blocks * block
        if s + 1 < len(stages):
            merged = (size // 2) ** 2
            breakdown[f"stages.{s}.downsample"] = merged * 4 * C + merged * 4 * C * stages[s + 1].channels
    size = cfg.stage_resolution(len(stages) - 1)
    last = stages[-1].channels
    breakdown["head"] = 2 * size * size * last + last * cfg.num_classes
    return breakdown


def count_params_flops(
    cfg_or_name: Union[ModelConfig, str],
    resolution: int = 224,
    convention: str = "mac",
) -> Counts:
    """
    パラメータ数とFLOPsを解析的に数える。

    Args:
        cfg_or_name: ModelConfig もしくは名前付きアーキテクチャ（SwinT_LSA など）
        resolution: 入力解像度
        convention: "mac" または "2mac"

    Raises:
        UnknownArchitectureError: 未知の名前
        ModelConfigError: 解像度がモデル構成と合わない場合など
    """
    if convention not in CONVENTIONS:
        raise ModelConfigError(f"未知のFLOP規約です: {convention}（候補: {', '.join(CONVENTIONS)}）")
    cfg = named_architecture(cfg_or_name) if isinstance(cfg_or_name, str) else cfg_or_name
    cfg = replace(cfg, image_size=resolution)
    params = sum(spec.size for spec in param_specs(cfg).values())
    factor = 2 if convention == "2mac" else 1
    breakdown = {name: factor * macs for name, macs in _macs(cfg).items()}
    counts = Counts(
        params=params,
        flops=sum(breakdown.values()),
        convention=convention,
        resolution=resolution,
        breakdown=breakdown,
    )
    logger.debug(f"params={counts.params:,}, flops={counts.flops:,} ({convention})")
    return counts
