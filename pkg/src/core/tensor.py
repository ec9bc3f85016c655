"""
Dense tensor primitives for local spatial processing.

This module provides:
- dtype helpers and tensor validation (C-order float32 / float64 arrays)
- the shared OffsetOrder (row-major, dy outer, dx inner)
- unfold / fold, channel contraction and grouped same-padding correlation
- softmax, filter normalization, GELU, layer normalization, sign-preserving power

All functions are pure: they never modify their inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import erf

from src.core.exceptions import KernelSizeError, NonFiniteError, TensorError, TensorShapeError

logger = logging.getLogger(__name__)

DTYPES: Dict[str, np.dtype] = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
}

DEFAULT_FILTER_NORM_EPS = 1e-5


def resolve_dtype(name_or_dtype) -> np.dtype:
    """'f32' / 'f64' またはnumpy dtypeを正規化する。"""
    if isinstance(name_or_dtype, str) and name_or_dtype in DTYPES:
        return DTYPES[name_or_dtype]
    dtype = np.dtype(name_or_dtype)
    if dtype not in (DTYPES["f32"], DTYPES["f64"]):
        raise TensorError(f"未対応のdtypeです: {dtype}（f32 / f64のみ）")
    return dtype


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, candidate in DTYPES.items():
        if candidate == dtype:
            return name
    raise TensorError(f"未対応のdtypeです: {dtype}")


def as_tensor(data, dtype=None) -> np.ndarray:
    """入力をC-orderの浮動小数テンソルに変換し、不変条件を検証する。

    Args:
        data: 配列ライクな入力
        dtype: 'f32' / 'f64' / numpy dtype（省略時は入力のdtype、整数ならf64）

    Returns:
        連続メモリのnumpy配列

    Raises:
        TensorShapeError: 0次元、または長さ0の軸を含む場合
    """
    array = np.asarray(data)
    if dtype is None:
        dtype = array.dtype if array.dtype in (DTYPES["f32"], DTYPES["f64"]) else DTYPES["f64"]
    array = np.ascontiguousarray(array, dtype=resolve_dtype(dtype))
    if array.ndim == 0:
        raise TensorShapeError("テンソルは1次元以上である必要があります")
    if any(extent < 1 for extent in array.shape):
        raise TensorShapeError(f"すべての軸の長さは1以上である必要があります: {array.shape}")
    return array


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} に非有限値が含まれています")


def _require_odd_kernel(kernel_size: int) -> None:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise KernelSizeError(f"カーネルサイズは1以上の奇数である必要があります: {kernel_size}")


def _require_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise TensorShapeError(f"{name} は (B, C, H, W) の4次元である必要があります: {x.shape}")


@dataclass(frozen=True)
class OffsetOrder:
    """K×K近傍の相対オフセット (dy, dx) の並び。dyが外側、dxが内側。"""

    kernel_size: int

    def __post_init__(self) -> None:
        _require_odd_kernel(self.kernel_size)

    @property
    def radius(self) -> int:
        return self.kernel_size // 2

    @property
    def offsets(self) -> Tuple[Tuple[int, int], ...]:
        return _offsets(self.kernel_size)

    def __len__(self) -> int:
        return self.kernel_size * self.kernel_size

    def index_of(self, dy: int, dx: int) -> int:
        r = self.radius
        if abs(dy) > r or abs(dx) > r:
            raise KernelSizeError(f"オフセット ({dy}, {dx}) はカーネル {self.kernel_size} の範囲外です")
        return (dy + r) * self.kernel_size + (dx + r)

    @property
    def center(self) -> int:
        return self.index_of(0, 0)


@lru_cache(maxsize=None)
def _offsets(kernel_size: int) -> Tuple[Tuple[int, int], ...]:
    r = kernel_size // 2
    return tuple((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1))


def offset_order(kernel_size: int) -> OffsetOrder:
    return OffsetOrder(kernel_size)


def unfold(x: np.ndarray, kernel_size: int) -> np.ndarray:
    """K×K近傍をゼロパディング付きで展開する（im2col）。

    Args:
        x: (B, C, H, W)
        kernel_size: 奇数のカーネルサイズK

    Returns:
        (B, C, K*K, H*W)。out[b, c, t, i] はピクセルiをOffsetOrder[t]だけずらした位置の値
    """
    _require_4d(x, "unfold入力")
    order = offset_order(kernel_size)
    B, C, H, W = x.shape
    r = order.radius
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((B, C, len(order), H * W), dtype=x.dtype)
    for t, (dy, dx) in enumerate(order.offsets):
        window = padded[:, :, r + dy:r + dy + H, r + dx:r + dx + W]
        out[:, :, t, :] = window.reshape(B, C, H * W)
    return out


def fold(cols: np.ndarray, kernel_size: int, height: int, width: int) -> np.ndarray:
    """unfoldの随伴（重なる位置は加算）。"""
    if cols.ndim != 4:
        raise TensorShapeError(f"fold入力は (B, C, K*K, H*W) である必要があります: {cols.shape}")
    order = offset_order(kernel_size)
    B, C, T, P = cols.shape
    if T != len(order) or P != height * width:
        raise TensorShapeError(f"fold入力の形状 {cols.shape} がK={kernel_size}, H={height}, W={width} と一致しません")
    r = order.radius
    padded = np.zeros((B, C, height + 2 * r, width + 2 * r), dtype=cols.dtype)
    for t, (dy, dx) in enumerate(order.offsets):
        padded[:, :, r + dy:r + dy + height, r + dx:r + dx + width] += cols[:, :, t, :].reshape(B, C, height, width)
    return padded[:, :, r:r + height, r:r + width].copy()


def softmax_over(x: np.ndarray, axis: int) -> np.ndarray:
    """最大値減算で安定化したsoftmax。NaN入力は拒否する。"""
    if np.isnan(x).any():
        raise NonFiniteError("softmax入力にNaNが含まれています")
    if not -x.ndim <= axis < x.ndim:
        raise TensorShapeError(f"軸 {axis} は {x.ndim} 次元テンソルに存在しません")
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    shifted = np.exp(x - peak)
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(x, axis=axis, keepdims=True)
    shifted = x - peak
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def filter_normalize(x: np.ndarray, axis: int = 2, eps: float = DEFAULT_FILTER_NORM_EPS) -> np.ndarray:
    """フィルタ要素軸に沿って平均0・母標準偏差1へ標準化する: (v - mean) / (std + eps)。

    分散0のスライスは0になる。軸長1のときは全要素0を返し、WARNINGを出す。
    """
    length = x.shape[axis]
    if length < 2:
        logger.warning("filter_normalize: フィルタ軸の長さが1のため標準偏差が定義できません（0を返します）")
        return np.zeros_like(x)
    centered = x - np.mean(x, axis=axis, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True))
    denom = np.broadcast_to(std + eps, centered.shape)
    return np.divide(centered, denom, out=np.zeros_like(centered), where=denom > 0)


def contract_channel(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """チャネル縮約: out[b,g,t,h,w] = Σ_c x[b,c,h,w]·table[c,g,t]。"""
    _require_4d(x, "contract_channel入力")
    if table.ndim != 3 or table.shape[0] != x.shape[1]:
        raise TensorShapeError(f"チャネル数が一致しません: x {x.shape}, table {table.shape}")
    return np.einsum("bchw,cgt->bgthw", x, table, optimize=True)


def conv2d(x: np.ndarray, weight: np.ndarray, groups: int = 1) -> np.ndarray:
    """stride 1・ゼロパディング(K//2)のグループ相関。

    カーネル位置 (ky, kx) はオフセット (ky - K//2, kx - K//2) に対応し、
    OffsetOrderの t = ky*K + kx と一致する。全要素0のタップは読み飛ばす。

    Args:
        x: (B, Cin, H, W)
        weight: (Cout, Cin/groups, K, K)
        groups: グループ数

    Returns:
        (B, Cout, H, W)
    """
    _require_4d(x, "conv2d入力")
    B, c_in, H, W = x.shape
    c_out, cin_g, K, K2 = weight.shape
    if K != K2:
        raise KernelSizeError(f"正方カーネルのみ対応しています: {weight.shape}")
    _require_odd_kernel(K)
    if groups < 1 or c_in != cin_g * groups or c_out % groups != 0:
        raise TensorShapeError(f"グループ構成が不正です: x {x.shape}, weight {weight.shape}, groups={groups}")
    cout_g = c_out // groups
    r = K // 2
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r))).reshape(B, groups, cin_g, H + 2 * r, W + 2 * r)
    w = weight.reshape(groups, cout_g, cin_g, K, K)
    out = np.zeros((B, groups, cout_g, H, W), dtype=np.result_type(x, weight))
    for ky in range(K):
        for kx in range(K):
            tap = w[:, :, :, ky, kx]
            if not tap.any():
                continue
            window = padded[:, :, :, ky:ky + H, kx:kx + W]
            out += np.einsum("bgihw,goi->bgohw", window, tap, optimize=True)
    return out.reshape(B, c_out, H, W)


def gelu(x: np.ndarray) -> np.ndarray:
    """erfによる厳密なGELU（tanh近似は使わない）。"""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_derivative(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return (cdf + x * pdf).astype(x.dtype, copy=False)


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, axis: int = 1, eps: float = 1e-5) -> np.ndarray:
    """指定軸（既定はチャネル軸）に沿ったレイヤー正規化。"""
    mean = np.mean(x, axis=axis, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=axis, keepdims=True)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    normed = (x - mean) / np.sqrt(var + eps)
    return normed * weight.reshape(shape) + bias.reshape(shape)


def spow(x: np.ndarray, exponent: float) -> np.ndarray:
    """符号保存べき乗 sgn(x)·|x|^λ。"""
    return np.sign(x) * np.power(np.abs(x), exponent)


def spow_derivative(x: np.ndarray, exponent: float) -> np.ndarray:
    """spowの導関数。λ<1のx=0（微分不能点）と λ=0 では0とする。"""
    if exponent == 0:
        return np.zeros_like(x)
    magnitude = np.abs(x)
    if exponent >= 1:
        return exponent * np.power(magnitude, exponent - 1)
    safe = np.where(magnitude > 0, magnitude, 1.0)
    return np.where(magnitude > 0, exponent * np.power(safe, exponent - 1), 0.0).astype(x.dtype, copy=False)


def element_size(dtype) -> int:
    return np.dtype(dtype).itemsize


def window_count(height: int, width: int, window: int) -> Optional[int]:
    """ウィンドウ分割数。割り切れなければNone。"""
    if window < 1 or height % window or width % window:
        return None
    return (height // window) * (width // window)
