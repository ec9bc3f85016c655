"""
パラメータ数・FLOPsカウンタのテスト。
"""

from __future__ import annotations

import pytest

from src.core.exceptions import ModelConfigError, UnknownArchitectureError
from src.model.counter import ARCHITECTURES, TARGETS, count_params_flops
from src.model.network import build_model, tiny_config

# 層ごとの積和を手で積み上げた値（mac規約、224×224）
EXPECTED = {
    "SwinT_LSA": (28_288_354, 4_494_329_856),
    "SwinT_ELSA": (28_842_034, 4_628_450_304),
    "SwinT_ELSA_HA_only": (28_559_794, 4_562_067_456),
    "SwinT_DwConv": (24_163_912, 3_730_626_048),
}


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_named_architectures_exact(name) -> None:
    counts = count_params_flops(name)
    assert (counts.params, counts.flops) == EXPECTED[name]


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_named_architectures_within_target_tolerance(name) -> None:
    counts = count_params_flops(name)
    params_dev, flops_dev = counts.deviation(name)

    assert params_dev <= 0.03
    assert flops_dev <= 0.10
    assert counts.within_target(name) is True


def test_elsa_costs_more_than_lsa() -> None:
    lsa = count_params_flops("SwinT_LSA")
    elsa = count_params_flops("SwinT_ELSA")
    ha_only = count_params_flops("SwinT_ELSA_HA_only")

    assert lsa.flops < ha_only.flops < elsa.flops
    assert lsa.params < ha_only.params < elsa.params


def test_double_mac_convention_doubles_flops() -> None:
    mac = count_params_flops("SwinT_DwConv")
    double = count_params_flops("SwinT_DwConv", convention="2mac")

    assert double.flops == 2 * mac.flops
    assert double.params == mac.params
    assert double.deviation("SwinT_DwConv") is None


@pytest.mark.parametrize("name", ["SwinT_LSA", "SwinT_ELSA"])
def test_targets_are_mac_counts(name) -> None:
    """目標FLOPsは mac 規約でのみ許容範囲に入る。"""
    double = count_params_flops(name, convention="2mac")
    assert double.flops / TARGETS[name][1] > 1.8


def test_breakdown_sums_to_total() -> None:
    counts = count_params_flops("SwinT_ELSA")
    assert sum(counts.breakdown.values()) == counts.flops
    assert set(counts.breakdown) >= {"patch_embed", "stages.0.blocks", "stages.2.downsample", "head"}


def test_other_resolution_has_no_target() -> None:
    counts = count_params_flops("SwinT_LSA", resolution=448)
    assert counts.within_target("SwinT_LSA") is None
    assert counts.flops > 3 * count_params_flops("SwinT_LSA").flops


def test_resolution_must_allow_downsampling() -> None:
    with pytest.raises(ModelConfigError):
        count_params_flops("SwinT_LSA", resolution=112)


def test_unknown_architecture() -> None:
    with pytest.raises(UnknownArchitectureError):
        count_params_flops("ResNet50")


def test_unknown_convention() -> None:
    with pytest.raises(ModelConfigError):
        count_params_flops("SwinT_LSA", convention="3mac")


@pytest.mark.parametrize("mixer", ["LSA", "DwConv", "ELSA"])
def test_param_count_agrees_with_built_model(mixer) -> None:
    cfg = tiny_config(mixer)
    counts = count_params_flops(cfg, resolution=cfg.image_size)
    assert counts.params == build_model(cfg, seed=0).param_count


def test_targets_cover_named_architectures() -> None:
    assert set(TARGETS) == set(ARCHITECTURES)
