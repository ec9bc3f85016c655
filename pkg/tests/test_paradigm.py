"""
統一パラダイム（ウィンドウ/近傍、4項ロジット、3種の正規化）のテスト。
"""

from __future__ import annotations

import numpy as np
import pytest

from src.core import ops, paradigm
from src.core.exceptions import ParadigmConfigError, TensorShapeError, UnknownPresetError, WindowSizeError
from src.core.gradcheck import fd_check
from src.core.paradigm import Application, ApplicationMode, Norm, NormStatus, ParadigmConfig
from src.suites.equivalence import _random_tables, compare_preset


def _qkv(rng, shape):
    return tuple(rng.standard_normal(shape) for _ in range(3))


class TestParadigmConfig:
    """ParadigmConfigの不変条件とシリアライズ。"""

    def test_requires_at_least_one_term(self):
        with pytest.raises(ParadigmConfigError):
            ParadigmConfig(False, False, False, False, Norm.SOFTMAX, Application.window(2), heads=1, channels=4)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ParadigmConfigError):
            ParadigmConfig(True, False, False, False, Norm.SOFTMAX, Application.window(2), heads=3, channels=8)

    def test_neighboring_kernel_must_be_odd(self):
        with pytest.raises(ParadigmConfigError):
            ParadigmConfig(True, False, False, False, Norm.SOFTMAX, Application.neighboring(4), heads=2, channels=8)

    def test_default_qk_scale(self):
        cfg = paradigm.preset("Net7", channels=8, heads=2, size=3)
        assert cfg.qk_scale == pytest.approx(0.5)
        assert cfg.with_shape(channels=18, heads=2).qk_scale == pytest.approx(1.0 / 3.0)

    def test_table_sizes(self):
        assert Application.window(7).table_size == 169
        assert Application.neighboring(7).table_size == 49
        assert Application.window(7).filter_elements == 49

    def test_text_round_trip(self):
        cfg = paradigm.preset("Net6N", channels=12, heads=3, size=5, pad_mask=True)
        text = paradigm.paradigm_config_to_text(cfg)

        assert "paradigm.application = Neighboring" in text
        assert paradigm.paradigm_config_from_text(text) == cfg

    def test_missing_key(self):
        with pytest.raises(ParadigmConfigError):
            paradigm.paradigm_config_from_text("paradigm.use_qk = true\n")

    def test_missing_section(self):
        with pytest.raises(ParadigmConfigError):
            paradigm.paradigm_config_from_text("other.value = 1\n")


class TestPresets:
    """名前付きプリセット表。"""

    def test_all_presets_resolve(self):
        for name in paradigm.preset_names():
            cfg = paradigm.preset(name, channels=8, heads=2, size=3)
            assert cfg.channels == 8

    def test_unknown_preset(self):
        with pytest.raises(UnknownPresetError):
            paradigm.preset("Net99")

    def test_dwconv_is_depthwise(self):
        cfg = paradigm.preset("DwConv", channels=8, heads=2, size=3)
        assert cfg.heads == 8
        assert cfg.norm is Norm.IDENTITY
        assert cfg.application.mode is ApplicationMode.NEIGHBORING

    def test_swin_lsa_terms(self):
        rows = {row["name"]: row for row in paradigm.preset_table_rows()}
        assert rows["SwinLSA"]["terms"] == "q·k+r^b"
        assert rows["Net7"]["terms"] == "q·k+q·r^k+r^q·k+r^b"
        assert rows["Net7Identity"]["unstable"] is True
        assert rows["Net7"]["unstable"] is False
        assert rows["InvolutionLike"]["application"] == "Neighboring"

    def test_identity_norm_flagged_unstable(self):
        assert paradigm.preset("Net7Identity").unstable
        assert not paradigm.preset("Net7FilterNorm").unstable


class TestDegeneracies:
    """プリセットが専用実装・参照実装と一致すること。"""

    @pytest.mark.parametrize("name", ["DwConv", "SwinLSA", "InvolutionLike", "Net7", "Net7N", "Net7FilterNorm", "Net2"])
    def test_preset_matches_dedicated(self, name):
        row = compare_preset(name, (2, 8, 6, 6), 3, 2, instance=0, seed=0, dtype="f64", tolerance=1e-10)

        assert row is not None
        assert row.status == "pass", f"{row.subject}: {row.max_abs_diff:.3e}"

    def test_kernel_five_on_non_square_map(self):
        row = compare_preset("Net6N", (1, 4, 5, 7), 5, 2, instance=0, seed=3, dtype="f64", tolerance=1e-10)
        assert row.status == "pass"

    def test_heads_not_dividing_channels_is_skipped(self):
        assert compare_preset("Net7", (1, 6, 4, 4), 3, 4, instance=0, seed=0, dtype="f64", tolerance=1e-10) is None

    @pytest.mark.parametrize("norm_preset", ["Net7N", "Net6N"])
    def test_pad_mask_matches_reference(self, rng, norm_preset):
        cfg = paradigm.preset(norm_preset, channels=4, heads=2, size=3, pad_mask=True)
        tables = _random_tables(cfg, rng, np.float64)
        q, k, v = _qkv(rng, (1, 4, 4, 5))

        fast = paradigm.unified_forward(q, k, v, tables, cfg)
        slow = paradigm.unified_reference(q, k, v, tables, cfg)

        np.testing.assert_allclose(fast, slow, atol=1e-10)

    def test_pad_mask_changes_border_only(self, rng):
        masked = paradigm.preset("Net7N", channels=4, heads=2, size=3, pad_mask=True)
        unmasked = paradigm.preset("Net7N", channels=4, heads=2, size=3)
        tables = _random_tables(masked, rng, np.float64)
        q, k, v = _qkv(rng, (1, 4, 5, 5))

        a = paradigm.unified_forward(q, k, v, tables, masked)
        b = paradigm.unified_forward(q, k, v, tables, unmasked)

        np.testing.assert_allclose(a[:, :, 1:-1, 1:-1], b[:, :, 1:-1, 1:-1], atol=1e-12)
        assert not np.allclose(a[:, :, 0, :], b[:, :, 0, :])


class TestAttentionMap:
    """正規化状態の宣言と実際の値。"""

    def test_softmax_map_sums_to_one(self, rng):
        cfg = paradigm.preset("Net7", channels=8, heads=2, size=3)
        q, k, _ = _qkv(rng, (2, 8, 6, 6))
        attn = paradigm.compute_attention_map(q, k, _random_tables(cfg, rng, np.float64), cfg)

        assert attn.normalized is NormStatus.SOFTMAX_NORMED
        assert attn.values.shape == (2, 2, 9, 36)
        assert attn.check()

    def test_filter_norm_map_statistics(self, rng):
        cfg = paradigm.preset("Net7FilterNorm", channels=8, heads=2, size=3)
        q, k, _ = _qkv(rng, (1, 8, 6, 6))
        attn = paradigm.compute_attention_map(q, k, _random_tables(cfg, rng, np.float64), cfg)

        assert attn.normalized is NormStatus.FILTER_NORMED
        assert attn.check()

    def test_filter_norm_map_normalizes_identity_map(self, rng):
        normed = paradigm.preset("Net7FilterNorm", channels=8, heads=2, size=3)
        raw_cfg = paradigm.preset("Net7Identity", channels=8, heads=2, size=3)
        tables = _random_tables(normed, rng, np.float64)
        q, k, _ = _qkv(rng, (2, 8, 6, 6))

        raw = paradigm.compute_attention_map(q, k, tables, raw_cfg)
        expected = paradigm.filter_normalize_map(raw, normed.filter_norm_eps)
        attn = paradigm.compute_attention_map(q, k, tables, normed)

        assert raw.normalized is NormStatus.RAW
        assert expected.normalized is NormStatus.FILTER_NORMED and not expected.degenerate
        np.testing.assert_allclose(attn.values, expected.values, rtol=0, atol=1e-12)
        np.testing.assert_allclose(attn.values.mean(axis=2), 0.0, atol=1e-6)
        np.testing.assert_allclose(attn.values.std(axis=2), 1.0, atol=1e-4)

    def test_filter_norm_map_agrees_with_forward(self, rng):
        cfg = paradigm.preset("Net7FilterNorm", channels=4, heads=2, size=3)
        tables = _random_tables(cfg, rng, np.float64)
        q, k, v = _qkv(rng, (1, 4, 3, 3))

        attn = paradigm.compute_attention_map(q, k, tables, cfg)
        out = paradigm.unified_forward(q, k, v, tables, cfg)
        # 3×3 の特徴マップと窓3なら窓は1つで、P は画素の行優先
        expected = np.einsum("gjp,gdj->gdp", attn.values[0], v[0].reshape(2, 2, 9)).reshape(4, 3, 3)

        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_single_element_filter_norm_is_degenerate(self, rng):
        cfg = paradigm.preset("Net7FilterNorm", channels=4, heads=2, size=1)
        q, k, _ = _qkv(rng, (1, 4, 3, 3))
        attn = paradigm.compute_attention_map(q, k, _random_tables(cfg, rng, np.float64), cfg)

        assert attn.degenerate
        np.testing.assert_array_equal(attn.values, 0.0)
        assert attn.check()

    def test_identity_map_is_raw(self, rng):
        cfg = paradigm.preset("InvolutionLike", channels=4, heads=2, size=3)
        q, k, _ = _qkv(rng, (1, 4, 3, 3))
        attn = paradigm.compute_attention_map(q, k, _random_tables(cfg, rng, np.float64), cfg)
        assert attn.normalized is NormStatus.RAW


class TestWindowing:
    """ウィンドウ分割と相対位置インデックス。"""

    def test_relative_index_diagonal_is_center(self):
        index = paradigm.relative_index(2)
        assert index.shape == (4, 4)
        np.testing.assert_array_equal(np.diag(index), 4)
        assert index.max() == 8

    def test_partition_merge_inverse(self, rng):
        x = rng.standard_normal((2, 6, 4, 6))
        windows = paradigm.window_partition(x, 3, 2)
        assert windows.shape == (2, 3, 2, 6, 4)
        np.testing.assert_array_equal(paradigm.window_merge(windows, x.shape, 3, 2), x)

    def test_window_must_divide_map(self, rng):
        cfg = paradigm.preset("Net7", channels=4, heads=2, size=4)
        q, k, v = _qkv(rng, (1, 4, 6, 6))
        with pytest.raises(WindowSizeError):
            paradigm.unified_forward(q, k, v, paradigm.init_tables(cfg, rng), cfg)

    def test_lsa_window_must_divide_map(self, rng):
        q, k, v = _qkv(rng, (1, 4, 6, 6))
        with pytest.raises(WindowSizeError):
            paradigm.lsa_forward(q, k, v, np.zeros((2, 49)), 4, 0.5)

    def test_windows_do_not_interact(self, rng):
        cfg = paradigm.preset("SwinLSA", channels=4, heads=2, size=2)
        tables = _random_tables(cfg, rng, np.float64)
        q, k, v = _qkv(rng, (1, 4, 4, 4))
        base = paradigm.unified_forward(q, k, v, tables, cfg)
        v2 = v.copy()
        v2[:, :, 2:, 2:] += 10.0

        changed = paradigm.unified_forward(q, k, v2, tables, cfg)

        np.testing.assert_allclose(changed[:, :, :2, :], base[:, :, :2, :], atol=1e-12)
        np.testing.assert_allclose(changed[:, :, :, :2], base[:, :, :, :2], atol=1e-12)


class TestShapesAndGradients:
    """形状検証と勾配。"""

    def test_table_shape_validated(self, rng):
        cfg = paradigm.preset("Net7", channels=4, heads=2, size=2)
        tables = paradigm.init_tables(cfg, rng)
        tables.r_b = np.zeros((2, 5))
        q, k, v = _qkv(rng, (1, 4, 4, 4))
        with pytest.raises(TensorShapeError):
            paradigm.unified_forward(q, k, v, tables, cfg)

    def test_missing_table(self, rng):
        cfg = paradigm.preset("Net7", channels=4, heads=2, size=2)
        tables = paradigm.init_tables(cfg, rng)
        tables.r_q = None
        q, k, v = _qkv(rng, (1, 4, 4, 4))
        with pytest.raises(ParadigmConfigError):
            paradigm.unified_forward(q, k, v, tables, cfg)

    def test_dynamic_filter_generator_shape(self, rng):
        q, _, v = _qkv(rng, (1, 4, 3, 3))
        with pytest.raises(TensorShapeError):
            paradigm.dynamic_filter_reference(q, v, np.zeros((2, 2, 4)), 3)

    def test_init_tables_only_for_enabled_terms(self, rng):
        tables = paradigm.init_tables(paradigm.preset("SwinLSA", channels=4, heads=2, size=2), rng)
        assert tables.r_k is None and tables.r_q is None
        assert tables.r_b.shape == (2, 9)
        assert np.all(np.abs(tables.r_b) <= 0.04)

    @pytest.mark.parametrize("name,size", [("Net7", 2), ("Net7N", 3), ("Net7FilterNorm", 2)])
    def test_gradients_match_finite_differences(self, rng, name, size):
        cfg = paradigm.preset(name, channels=4, heads=2, size=size)
        tables = _random_tables(cfg, rng, np.float64)
        q, k, v = _qkv(rng, (1, 4, 4, 4))
        weights = rng.standard_normal((1, 4, 4, 4))
        params = {"q": q, "k": k, "v": v, **tables.as_params("t_")}

        def loss(p):
            t = paradigm.RelPosTables(r_k=p.get("t_r_k"), r_q=p.get("t_r_q"), r_b=p.get("t_r_b"))
            out = paradigm.unified_forward(p["q"], p["k"], p["v"], t, cfg)
            return ops.sum(ops.mul(out, weights))

        report = fd_check(loss, params)
        assert report.passed(1e-6), report.max_rel_err
