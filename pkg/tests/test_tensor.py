"""
テンソル基本演算（unfold / fold / conv2d / softmax / フィルタ正規化など）のテスト。
"""

from __future__ import annotations

import logging

import numpy as np
import pytest

from src.core import tensor as T
from src.core.exceptions import KernelSizeError, NonFiniteError, TensorError, TensorShapeError


class TestOffsetOrder:
    """近傍オフセットの並び順。"""

    def test_row_major_dy_outer(self):
        order = T.offset_order(3)
        assert order.offsets[0] == (-1, -1)
        assert order.offsets[1] == (-1, 0)
        assert order.offsets[3] == (0, -1)
        assert order.offsets[-1] == (1, 1)
        assert len(order) == 9

    def test_center_and_index(self):
        order = T.offset_order(5)
        assert order.center == 12
        assert order.index_of(-2, -2) == 0
        assert order.index_of(1, 2) == 19

    def test_index_out_of_range(self):
        with pytest.raises(KernelSizeError):
            T.offset_order(3).index_of(2, 0)

    @pytest.mark.parametrize("kernel_size", [0, 2, 4, -1])
    def test_rejects_invalid_kernel(self, kernel_size):
        with pytest.raises(KernelSizeError):
            T.offset_order(kernel_size)


class TestUnfold:
    """im2col 展開とその随伴。"""

    def test_corner_pixel_is_zero_padded(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
        cols = T.unfold(x, 3)

        assert cols.shape == (1, 1, 9, 9)
        np.testing.assert_array_equal(cols[0, 0, :, 0], [0, 0, 0, 0, 1, 2, 0, 4, 5])

    def test_center_tap_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        cols = T.unfold(x, 5)
        np.testing.assert_array_equal(cols[:, :, 12, :], x.reshape(2, 3, 20))

    def test_kernel_one_is_reshape(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(T.unfold(x, 1)[:, :, 0, :], x.reshape(1, 2, 9))

    def test_fold_is_adjoint(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        y = rng.standard_normal((2, 3, 9, 20))
        lhs = np.sum(T.unfold(x, 3) * y)
        rhs = np.sum(x * T.fold(y, 3, 5, 4))
        assert abs(lhs - rhs) < 1e-10

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(KernelSizeError):
            T.unfold(rng.standard_normal((1, 1, 4, 4)), 2)

    def test_requires_4d(self):
        with pytest.raises(TensorShapeError):
            T.unfold(np.zeros((3, 4, 4)), 3)

    def test_fold_shape_mismatch(self):
        with pytest.raises(TensorShapeError):
            T.fold(np.zeros((1, 1, 9, 10)), 3, 3, 3)


class TestConv2d:
    """同一パディングのグループ相関。"""

    def test_depthwise_matches_unfold(self, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        weight = rng.standard_normal((4, 1, 3, 3))
        expected = np.einsum("bcti,ct->bci", T.unfold(x, 3), weight.reshape(4, 9)).reshape(2, 4, 5, 5)
        np.testing.assert_allclose(T.conv2d(x, weight, groups=4), expected, atol=1e-12)

    def test_dense_matches_unfold(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        weight = rng.standard_normal((5, 3, 3, 3))
        expected = np.einsum("bcti,oct->boi", T.unfold(x, 3), weight.reshape(5, 3, 9)).reshape(1, 5, 4, 4)
        np.testing.assert_allclose(T.conv2d(x, weight), expected, atol=1e-12)

    def test_one_hot_kernel_shifts(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        weight = np.zeros((1, 1, 3, 3))
        weight[0, 0, 1, 2] = 1.0  # オフセット (0, +1)
        out = T.conv2d(x, weight)
        np.testing.assert_array_equal(out[0, 0, :, :3], x[0, 0, :, 1:])
        np.testing.assert_array_equal(out[0, 0, :, 3], 0.0)

    def test_invalid_groups(self, rng):
        with pytest.raises(TensorShapeError):
            T.conv2d(rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((4, 3, 3, 3)), groups=2)


class TestNormalizations:
    """softmax / フィルタ正規化 / レイヤー正規化。"""

    def test_softmax_sums_to_one_and_is_stable(self):
        x = np.array([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]])
        out = T.softmax_over(x, axis=1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        assert np.all(np.isfinite(out))

    def test_softmax_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            T.softmax_over(np.array([0.0, np.nan]), axis=0)

    def test_softmax_invalid_axis(self):
        with pytest.raises(TensorShapeError):
            T.softmax_over(np.zeros((2, 2)), axis=2)

    def test_filter_normalize_statistics(self, rng):
        x = rng.standard_normal((2, 3, 9, 4)) * 3.0 + 1.0
        out = T.filter_normalize(x, axis=2)
        np.testing.assert_allclose(out.mean(axis=2), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=2), 1.0, atol=1e-4)

    def test_filter_normalize_constant_slice_is_zero(self):
        x = np.full((1, 1, 9, 2), 4.0)
        np.testing.assert_array_equal(T.filter_normalize(x, axis=2), 0.0)

    def test_filter_normalize_single_element_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = T.filter_normalize(np.ones((1, 1, 1, 3)), axis=2)
        np.testing.assert_array_equal(out, 0.0)
        assert "filter_normalize" in caplog.text

    def test_layer_norm_channel_axis(self, rng):
        x = rng.standard_normal((2, 6, 3, 3)) * 2.0 + 5.0
        out = T.layer_norm(x, np.ones(6), np.zeros(6))
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


class TestElementwise:
    """GELU と符号保存べき乗。"""

    def test_gelu_exact_values(self):
        np.testing.assert_allclose(T.gelu(np.array([0.0, 1.0, -1.0])), [0.0, 0.8413447460685429, -0.15865525393145707])

    def test_spow_preserves_sign(self):
        x = np.array([-4.0, -1.0, 0.0, 1.0, 4.0])
        np.testing.assert_allclose(T.spow(x, 0.5), [-2.0, -1.0, 0.0, 1.0, 2.0])

    def test_spow_derivative_at_zero(self):
        assert T.spow_derivative(np.array([0.0]), 0.5)[0] == 0.0
        assert T.spow_derivative(np.array([0.0]), 2.0)[0] == 0.0
        np.testing.assert_array_equal(T.spow_derivative(np.array([3.0, -2.0]), 0.0), 0.0)

    def test_spow_derivative_matches_power_rule(self):
        x = np.array([-2.0, 0.5, 3.0])
        np.testing.assert_allclose(T.spow_derivative(x, 3.0), 3.0 * x ** 2)


class TestContractChannel:
    """チャネル縮約。"""

    def test_matches_triple_loop(self, rng):
        x = rng.standard_normal((2, 3, 2, 2))
        table = rng.standard_normal((3, 2, 9))

        out = T.contract_channel(x, table)

        expected = np.zeros((2, 2, 9, 2, 2))
        for b in range(2):
            for g in range(2):
                for t in range(9):
                    for c in range(3):
                        expected[b, g, t] += x[b, c] * table[c, g, t]
        assert out.shape == (2, 2, 9, 2, 2)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_one_hot_table_selects_channel(self, rng):
        x = rng.standard_normal((1, 4, 3, 3))
        table = np.zeros((4, 1, 2))
        table[2, 0, 0] = 1.0
        table[0, 0, 1] = 1.0

        out = T.contract_channel(x, table)

        np.testing.assert_array_equal(out[0, 0, 0], x[0, 2])
        np.testing.assert_array_equal(out[0, 0, 1], x[0, 0])

    @pytest.mark.parametrize("table_shape", [(4, 2, 9), (3, 18)])
    def test_rejects_mismatched_table(self, rng, table_shape):
        with pytest.raises(TensorShapeError):
            T.contract_channel(rng.standard_normal((1, 3, 2, 2)), np.zeros(table_shape))


class TestCheckFinite:
    """非有限値の検出。"""

    def test_passes_finite_values(self):
        T.check_finite(np.array([0.0, -1.5, 1e30]), "値")

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_raises_with_name(self, bad):
        with pytest.raises(NonFiniteError, match="ロジット"):
            T.check_finite(np.array([1.0, bad]), "ロジット")


class TestDtypeHelpers:
    """dtypeと入力検証。"""

    def test_resolve_names(self):
        assert T.resolve_dtype("f32") == np.float32
        assert T.dtype_name(np.float64) == "f64"

    def test_rejects_integer_dtype(self):
        with pytest.raises(TensorError):
            T.resolve_dtype(np.int32)

    def test_as_tensor_converts_integers_to_f64(self):
        out = T.as_tensor([[1, 2], [3, 4]])
        assert out.dtype == np.float64
        assert out.flags["C_CONTIGUOUS"]

    @pytest.mark.parametrize("data", [np.float64(1.0), np.zeros((2, 0))])
    def test_as_tensor_rejects_degenerate(self, data):
        with pytest.raises(TensorShapeError):
            T.as_tensor(data)

    def test_window_count(self):
        assert T.window_count(8, 8, 4) == 4
        assert T.window_count(6, 8, 4) is None

    def test_element_size(self):
        assert T.element_size(np.float32) == 4
        assert T.element_size("f8") == 8
