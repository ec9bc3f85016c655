"""
ELSA block: Hadamard attention, ghost head and neighborhood aggregation.

Hadamard attention（ヘッドg、画素i、近傍オフセットt、j = i + offset_t）:

    h_{g,t}(i) = softmax_t( (q_i⊙k_i)·r^k_{g,t} + r^q_{g,t}·(q_j⊙k_j) + r^b_{g,t} )

同じ値を次の3通りで計算できる（StrictUnfold ≡ ShiftConv ≡ MergedConv）:
- StrictUnfold: q⊙k を unfold してから r^q と縮約する
- ShiftConv:    1×1縮約を2つ、第2項は one-hot の depth-wise シフト畳み込みで位置合わせ
- MergedConv:   2つの1×1縮約を C→2·G·K² の1つに融合し、グループ畳み込みで中心+シフトを合成
Production は融合縮約とシフトの間に GELU を挟む別演算で、上の3つとは一致しない。

ghost head はG個の注意マップをCチャネルへ展開する:
    ĥ[c, t] = spow(O[c, t], λ)·h[c mod G, t] + γ·S[c, t]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from src.core import golden, ops
from src.core import tensor as T
from src.core.exceptions import ElsaError, GhostHeadError, TensorShapeError, UnknownVariantError
from src.utils import config as config_text
from src.utils.rng import normal, trunc_normal

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    STRICT_UNFOLD = "StrictUnfold"
    SHIFT_CONV = "ShiftConv"
    MERGED_CONV = "MergedConv"
    PRODUCTION = "Production"


EQUIVALENT_VARIANTS: Tuple[Variant, ...] = (Variant.STRICT_UNFOLD, Variant.SHIFT_CONV, Variant.MERGED_CONV)


def resolve_variant(variant: Union[str, Variant]) -> Variant:
    try:
        return Variant(variant)
    except ValueError as exc:
        names = ", ".join(v.value for v in Variant)
        raise UnknownVariantError(f"未知のバリアントです: {variant}（候補: {names}）") from exc


@dataclass
class GhostHeadParams:
    """ghost headの静的行列。O（乗算）と S（加算）、いずれも (C, K, K)。"""

    O: Any
    S: Any

    def validate(self, channels: int, kernel_size: Optional[int] = None) -> None:
        for name in ("O", "S"):
            shape = np.shape(ops.value_of(getattr(self, name)))
            if len(shape) < 2 or shape[0] != channels:
                raise GhostHeadError(f"ghost {name} のチャネル数 {shape[:1]} がブロックのチャネル数 {channels} と一致しません")
            if kernel_size is not None and shape != (channels, kernel_size, kernel_size):
                raise GhostHeadError(f"ghost {name} の形状 {shape} が ({channels}, {kernel_size}, {kernel_size}) ではありません")


@dataclass
class ElsaParams:
    """
    ELSAブロック1つ分の学習可能パラメータとハイパーパラメータ。

    テーブルの形状:
    - grouped=False: r_k_h, r_q_h は (C, G, K²)（全チャネルが全ヘッドに寄与）
    - grouped=True:  r_k_h, r_q_h は (C/G, G, K²)（各ヘッドは自分のチャネルだけを読む）
    配列の代わりに Var を入れると、そのまま勾配計算に使える。
    """

    proj_q: Any
    proj_k: Any
    proj_v: Any
    proj_out: Any
    r_k_h: Any
    r_q_h: Any
    r_b_h: Any
    kernel_size: int
    heads: int
    ghost: Optional[GhostHeadParams] = None
    bias_q: Any = None
    bias_k: Any = None
    bias_v: Any = None
    bias_out: Any = None
    lam: float = 1.0
    gamma: float = 1.0
    grouped: bool = False

    @property
    def channels(self) -> int:
        return int(np.shape(ops.value_of(self.proj_q))[0])

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def taps(self) -> int:
        return self.kernel_size * self.kernel_size

    def validate(self) -> None:
        C, G, K = self.channels, self.heads, self.kernel_size
        if K < 1 or K % 2 == 0:
            raise ElsaError(f"カーネルサイズは1以上の奇数である必要があります: {K}")
        if G < 1 or C % G:
            raise ElsaError(f"ヘッド数 {G} はチャネル数 {C} を割り切る必要があります")
        table_rows = C // G if self.grouped else C
        expected = {
            "proj_q": (C, C), "proj_k": (C, C), "proj_v": (C, C), "proj_out": (C, C),
            "r_k_h": (table_rows, G, K * K), "r_q_h": (table_rows, G, K * K), "r_b_h": (G, K * K),
        }
        for name, shape in expected.items():
            actual = tuple(np.shape(ops.value_of(getattr(self, name))))
            if actual != shape:
                raise TensorShapeError(f"{name} の形状 {actual} が期待値 {shape} と一致しません")
        for name in ("bias_q", "bias_k", "bias_v", "bias_out"):
            value = getattr(self, name)
            if value is not None and tuple(np.shape(ops.value_of(value))) != (C,):
                raise TensorShapeError(f"{name} の形状 {np.shape(ops.value_of(value))} が ({C},) ではありません")
        if self.ghost is not None:
            self.ghost.validate(C, K)

    def as_params(self) -> Dict[str, Any]:
        """学習可能テンソルの平坦な辞書（名前は固定）。"""
        params: Dict[str, Any] = {
            name: getattr(self, name)
            for name in ("proj_q", "proj_k", "proj_v", "proj_out", "r_k_h", "r_q_h", "r_b_h",
                         "bias_q", "bias_k", "bias_v", "bias_out")
            if getattr(self, name) is not None
        }
        if self.ghost is not None:
            params["ghost_O"] = self.ghost.O
            params["ghost_S"] = self.ghost.S
        return params

    def with_params(self, values: Mapping[str, Any]) -> "ElsaParams":
        """as_paramsと同じ名前の辞書で値を差し替えたコピーを返す。"""
        updates = {name: value for name, value in values.items() if not name.startswith("ghost_")}
        updated = replace(self, **updates)
        if self.ghost is not None and ("ghost_O" in values or "ghost_S" in values):
            updated.ghost = GhostHeadParams(O=values.get("ghost_O", self.ghost.O), S=values.get("ghost_S", self.ghost.S))
        return updated


def init_elsa_params(
    channels: int,
    heads: int,
    kernel_size: int,
    rng: np.random.Generator,
    *,
    grouped: bool = False,
    ghost: bool = True,
    bias: bool = True,
    lam: float = 1.0,
    gamma: float = 1.0,
    dtype=np.float64,
) -> ElsaParams:
    """
    ELSAパラメータの初期化。

    射影と相対位置テーブルは切断正規分布（std 0.02）、O は標準正規、S は切断正規（std 0.02）、
    バイアスは0。
    """
    C, G, taps = channels, heads, kernel_size * kernel_size
    if G < 1 or C % G:
        raise ElsaError(f"ヘッド数 {G} はチャネル数 {C} を割り切る必要があります")
    rows = C // G if grouped else C
    zeros = (lambda: np.zeros(C, dtype=dtype)) if bias else (lambda: None)
    params = ElsaParams(
        proj_q=trunc_normal(rng, (C, C), dtype=dtype),
        proj_k=trunc_normal(rng, (C, C), dtype=dtype),
        proj_v=trunc_normal(rng, (C, C), dtype=dtype),
        proj_out=trunc_normal(rng, (C, C), dtype=dtype),
        r_k_h=trunc_normal(rng, (rows, G, taps), dtype=dtype),
        r_q_h=trunc_normal(rng, (rows, G, taps), dtype=dtype),
        r_b_h=trunc_normal(rng, (G, taps), dtype=dtype),
        kernel_size=kernel_size,
        heads=G,
        ghost=GhostHeadParams(
            O=normal(rng, (C, kernel_size, kernel_size), dtype=dtype),
            S=trunc_normal(rng, (C, kernel_size, kernel_size), dtype=dtype),
        ) if ghost else None,
        bias_q=zeros(),
        bias_k=zeros(),
        bias_v=zeros(),
        bias_out=zeros(),
        lam=lam,
        gamma=gamma,
        grouped=grouped,
    )
    params.validate()
    return params


@dataclass
class HadamardAttention:
    """softmax正規化済みの Hadamard attention (B, G, K², H, W)。"""

    values: Any
    variant: Variant = Variant.STRICT_UNFOLD

    def check(self, tol: float = 1e-5) -> bool:
        sums = np.sum(ops.value_of(self.values), axis=2)
        return bool(np.all(np.abs(sums - 1.0) <= tol))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def project(x, weight, bias=None):
    """1×1射影: out[b, o] = Σ_c weight[o, c]·x[b, c] + bias[o]"""
    out = ops.einsum("oc,bchw->bohw", weight, x)
    if bias is not None:
        C = np.shape(ops.value_of(bias))[0]
        out = ops.add(out, ops.reshape(bias, (1, C, 1, 1)))
    return out


def _contract(hp, table, params: ElsaParams):
    """(B, C, H, W) × テーブル → (B, G, K², H, W)。"""
    B, C, H, W = np.shape(ops.value_of(hp))
    if params.grouped:
        heads = ops.reshape(hp, (B, params.heads, params.head_dim, H, W))
        return ops.einsum("bgdhw,dgt->bgthw", heads, table)
    return ops.contract_channel(hp, table)


def _contract_unfolded(table, hp, params: ElsaParams):
    """r^q と unfold(q⊙k) の縮約 → (B, G, K², H, W)。"""
    B, C, H, W = np.shape(ops.value_of(hp))
    K = params.kernel_size
    cols = ops.unfold(hp, K)
    if params.grouped:
        cols = ops.reshape(cols, (B, params.heads, params.head_dim, K * K, H, W))
        return ops.einsum("dgt,bgdthw->bgthw", table, cols)
    cols = ops.reshape(cols, (B, C, K * K, H, W))
    return ops.einsum("cgt,bcthw->bgthw", table, cols)


@lru_cache(maxsize=None)
def shift_kernel(heads: int, kernel_size: int) -> np.ndarray:
    """
    one-hot の depth-wise シフトカーネル (G·K², 1, K, K)。

    チャネル n = g·K² + t は位置 t のオフセット分だけ特徴マップをずらす。
    """
    taps = kernel_size * kernel_size
    kernel = np.zeros((heads * taps, 1, kernel_size, kernel_size))
    for n in range(heads * taps):
        t = n % taps
        kernel[n, 0, t // kernel_size, t % kernel_size] = 1.0
    kernel.setflags(write=False)
    return kernel


@lru_cache(maxsize=None)
def merged_shift_kernel(heads: int, kernel_size: int) -> np.ndarray:
    """融合版のカーネル (G·K², 2, K, K)。入力ペアの0番目は中心、1番目はオフセットtへ。"""
    taps = kernel_size * kernel_size
    center = kernel_size // 2
    kernel = np.zeros((heads * taps, 2, kernel_size, kernel_size))
    for n in range(heads * taps):
        t = n % taps
        kernel[n, 0, center, center] = 1.0
        kernel[n, 1, t // kernel_size, t % kernel_size] = 1.0
    kernel.setflags(write=False)
    return kernel


def _constant(kernel: np.ndarray, like) -> np.ndarray:
    return kernel.astype(ops.value_of(like).dtype)


def _rb_term(params: ElsaParams):
    return ops.reshape(params.r_b_h, (1, params.heads, params.taps, 1, 1))


def _strict_unfold_logits(hp, params: ElsaParams):
    term_k = _contract(hp, params.r_k_h, params)
    term_q = _contract_unfolded(params.r_q_h, hp, params)
    return ops.add(ops.add(term_k, term_q), _rb_term(params))


def _shift_conv_logits(hp, params: ElsaParams):
    B, C, H, W = np.shape(ops.value_of(hp))
    G, taps, K = params.heads, params.taps, params.kernel_size
    hp_rk = ops.add(_contract(hp, params.r_k_h, params), _rb_term(params))
    rq_hp = ops.reshape(_contract(hp, params.r_q_h, params), (B, G * taps, H, W))
    shifted = ops.conv2d(rq_hp, _constant(shift_kernel(G, K), hp), groups=G * taps)
    return ops.add(hp_rk, ops.reshape(shifted, (B, G, taps, H, W)))


def _merged_contraction(hp, params: ElsaParams):
    """C → 2·G·K² の融合1×1縮約。チャネル 2n が r^k 項（r^b をバイアスに持つ）、2n+1 が r^q 項。"""
    B, C, H, W = np.shape(ops.value_of(hp))
    G, taps = params.heads, params.taps
    rows = params.head_dim if params.grouped else C
    weight = ops.reshape(ops.stack([params.r_k_h, params.r_q_h], axis=-1), (rows, G, 2 * taps))
    if params.grouped:
        heads = ops.reshape(hp, (B, G, params.head_dim, H, W))
        merged = ops.einsum("bgdhw,dgm->bgmhw", heads, weight)
    else:
        merged = ops.contract_channel(hp, weight)
    zeros = np.zeros((G, taps), dtype=ops.value_of(params.r_b_h).dtype)
    bias = ops.reshape(ops.stack([params.r_b_h, zeros], axis=-1), (1, G, 2 * taps, 1, 1))
    return ops.reshape(ops.add(merged, bias), (B, 2 * G * taps, H, W))


def _merged_conv_logits(hp, params: ElsaParams, activation: bool = False):
    B, C, H, W = np.shape(ops.value_of(hp))
    G, taps, K = params.heads, params.taps, params.kernel_size
    merged = _merged_contraction(hp, params)
    if activation:
        merged = ops.gelu(merged)
    out = ops.conv2d(merged, _constant(merged_shift_kernel(G, K), hp), groups=G * taps)
    return ops.reshape(out, (B, G, taps, H, W))


def hadamard_logits(q, k, params: ElsaParams, variant: Union[str, Variant] = Variant.STRICT_UNFOLD):
    """softmax前の Hadamard attention ロジット (B, G, K², H, W)。"""
    variant = resolve_variant(variant)
    q_shape, k_shape = np.shape(ops.value_of(q)), np.shape(ops.value_of(k))
    if q_shape != k_shape or len(q_shape) != 4 or q_shape[1] != params.channels:
        raise TensorShapeError(f"q {q_shape}, k {k_shape} がパラメータ（C={params.channels}）と一致しません")
    hp = ops.mul(q, k)
    if variant is Variant.STRICT_UNFOLD:
        return _strict_unfold_logits(hp, params)
    if variant is Variant.SHIFT_CONV:
        return _shift_conv_logits(hp, params)
    if variant is Variant.MERGED_CONV:
        return _merged_conv_logits(hp, params)
    return _merged_conv_logits(hp, params, activation=True)


def hadamard_attention(q, k, params: ElsaParams, variant: Union[str, Variant] = Variant.STRICT_UNFOLD) -> HadamardAttention:
    """Hadamard attention（K²軸でsoftmax）。"""
    variant = resolve_variant(variant)
    logits = hadamard_logits(q, k, params, variant)
    return HadamardAttention(values=ops.softmax(logits, axis=2), variant=variant)


def _attention_values(h):
    return h.values if isinstance(h, HadamardAttention) else h


def ghost_head(h, ghost: GhostHeadParams, lam: float = 1.0, gamma: float = 1.0):
    """
    ghost head: G個のマップを C チャネルへ展開する。

    Args:
        h: HadamardAttention または (B, G, T, H, W)
        ghost: O, S（(C, K, K) もしくは (C, T)）
        lam: べき指数 λ（符号保存べき乗）
        gamma: 加算項の係数 γ

    Returns:
        (B, C, T, H, W)。チャネル c は h[c mod G] を使う

    Raises:
        GhostHeadError: G が C を割り切らない場合
    """
    values = _attention_values(h)
    B, G, taps, H, W = np.shape(ops.value_of(values))
    C = np.shape(ops.value_of(ghost.O))[0]
    if C % G:
        raise GhostHeadError(f"ヘッド数 {G} がチャネル数 {C} を割り切りません")
    if int(np.prod(np.shape(ops.value_of(ghost.O))[1:])) != taps:
        raise GhostHeadError(f"ghost行列の要素数がフィルタ要素数 {taps} と一致しません")
    expanded = ops.take(values, np.arange(C) % G, axis=1)
    scale_term = ops.reshape(ops.spow(ghost.O, lam), (1, C, taps, 1, 1))
    shift_term = ops.reshape(ops.scale(ghost.S, gamma), (1, C, taps, 1, 1))
    return ops.add(ops.mul(scale_term, expanded), shift_term)


def expand_heads(h, channels: int):
    """ghost headを使わない場合の展開。チャネル c はヘッド c // (C/G) を使う。"""
    values = _attention_values(h)
    G = np.shape(ops.value_of(values))[1]
    if channels % G:
        raise GhostHeadError(f"ヘッド数 {G} がチャネル数 {channels} を割り切りません")
    return ops.take(values, np.arange(channels) // (channels // G), axis=1)


def aggregate(weights, v, kernel_size: int):
    """f[b, c, i] = Σ_t weights[b, c, t, i]·unfold(v)[b, c, t, i]"""
    B, C, H, W = np.shape(ops.value_of(v))
    cols = ops.reshape(ops.unfold(v, kernel_size), (B, C, kernel_size * kernel_size, H, W))
    return ops.einsum("bcthw,bcthw->bchw", weights, cols)


def elsa_forward(x, params: ElsaParams, variant: Union[str, Variant] = Variant.STRICT_UNFOLD):
    """
    ELSAブロックの空間混合部分（残差と前置正規化はモデル側の責務）。

    Args:
        x: (B, C, H, W)
        params: ElsaParams
        variant: Hadamard attention の実装バリアント

    Returns:
        (B, C, H, W)
    """
    shape = np.shape(ops.value_of(x))
    if len(shape) != 4 or shape[1] != params.channels:
        raise TensorShapeError(f"入力 {shape} がパラメータ（C={params.channels}）と一致しません")
    q = project(x, params.proj_q, params.bias_q)
    k = project(x, params.proj_k, params.bias_k)
    v = project(x, params.proj_v, params.bias_v)
    h = hadamard_attention(q, k, params, variant)
    if params.ghost is not None:
        weights = ghost_head(h, params.ghost, params.lam, params.gamma)
    else:
        weights = expand_heads(h, params.channels)
    mixed = aggregate(weights, v, params.kernel_size)
    out = project(mixed, params.proj_out, params.bias_out)
    if not np.all(np.isfinite(ops.value_of(out))):
        logger.warning("elsa_forward: 出力に非有限値が含まれています")
    return out


# ---------------------------------------------------------------------------
# literal-loop evaluator
# ---------------------------------------------------------------------------

def elsa_reference(x: np.ndarray, params: ElsaParams) -> np.ndarray:
    """ELSAブロックを画素・オフセットごとのループで評価する参照実装（遅い、検証用）。"""
    params.validate()
    B, C, H, W = x.shape
    G, d, K = params.heads, params.head_dim, params.kernel_size
    order = T.offset_order(K)

    def proj(weight, bias, image):
        out = np.zeros_like(image)
        for y in range(H):
            for xx in range(W):
                out[:, y, xx] = weight @ image[:, y, xx] + (0.0 if bias is None else bias)
        return out

    out = np.zeros_like(x)
    for b in range(B):
        q = proj(params.proj_q, params.bias_q, x[b])
        k = proj(params.proj_k, params.bias_k, x[b])
        v = proj(params.proj_v, params.bias_v, x[b])
        hp = q * k
        mixed = np.zeros_like(x[b])
        for y in range(H):
            for xx in range(W):
                logits = np.zeros((G, len(order)))
                for g in range(G):
                    rows = range(g * d, (g + 1) * d) if params.grouped else range(C)
                    for t, (dy, dx) in enumerate(order.offsets):
                        yy, xj = y + dy, xx + dx
                        inside = 0 <= yy < H and 0 <= xj < W
                        total = float(params.r_b_h[g, t])
                        for row, c in enumerate(rows):
                            table_row = row if params.grouped else c
                            total += hp[c, y, xx] * params.r_k_h[table_row, g, t]
                            if inside:
                                total += params.r_q_h[table_row, g, t] * hp[c, yy, xj]
                        logits[g, t] = total
                weights = np.exp(logits - logits.max(axis=1, keepdims=True))
                weights /= weights.sum(axis=1, keepdims=True)
                for c in range(C):
                    if params.ghost is not None:
                        o = params.ghost.O[c].reshape(-1)
                        s = params.ghost.S[c].reshape(-1)
                        filt = np.sign(o) * np.abs(o) ** params.lam * weights[c % G] + params.gamma * s
                    else:
                        filt = weights[c // d]
                    acc = 0.0
                    for t, (dy, dx) in enumerate(order.offsets):
                        yy, xj = y + dy, xx + dx
                        if 0 <= yy < H and 0 <= xj < W:
                            acc += filt[t] * v[c, yy, xj]
                    mixed[c, y, xx] = acc
        out[b] = proj(params.proj_out, params.bias_out, mixed)
    return out


# ---------------------------------------------------------------------------
# global attention with ghost head
# ---------------------------------------------------------------------------

def ghost_head_global(attn, O, S, lam: float = 1.0, gamma: float = 1.0):
    """
    大域注意マップ (B, G, N, N) への ghost head。O, S は (C, N)、C = 2·G を想定。

    out[b, c, i, j] = spow(O[c, j], λ)·attn[b, c mod G, i, j] + γ·S[c, j]
    """
    B, G, N, N2 = np.shape(ops.value_of(attn))
    C = np.shape(ops.value_of(O))[0]
    if N != N2:
        raise TensorShapeError(f"大域注意マップは正方である必要があります: {(N, N2)}")
    if C < G or C % G:
        raise GhostHeadError(f"展開後のマップ数 {C} はヘッド数 {G} の1倍以上の整数倍である必要があります")
    if tuple(np.shape(ops.value_of(O))) != (C, N) or tuple(np.shape(ops.value_of(S))) != (C, N):
        raise GhostHeadError(f"O, S は ({C}, {N}) である必要があります")
    expanded = ops.take(attn, np.arange(C) % G, axis=1)
    scale_term = ops.reshape(ops.spow(O, lam), (1, C, 1, N))
    shift_term = ops.reshape(ops.scale(S, gamma), (1, C, 1, N))
    return ops.add(ops.mul(scale_term, expanded), shift_term)


def global_ghost_attention(q, k, v, heads: int, O, S, lam: float = 1.0, gamma: float = 1.0):
    """
    トークン列 (B, N, D) 上の大域softmax注意。G個のマップを ghost head で 2·G 個に増やし、
    v を 2·G グループに分けて適用する。

    Returns:
        (B, N, D)
    """
    B, N, D = np.shape(ops.value_of(q))
    expanded = np.shape(ops.value_of(O))[0]
    if D % heads or D % expanded:
        raise TensorShapeError(f"特徴次元 {D} がヘッド数 {heads} / 展開数 {expanded} で割り切れません")
    d = D // heads
    qh = ops.transpose(ops.reshape(q, (B, N, heads, d)), (0, 2, 1, 3))
    kh = ops.transpose(ops.reshape(k, (B, N, heads, d)), (0, 2, 1, 3))
    logits = ops.scale(ops.einsum("bgid,bgjd->bgij", qh, kh), d ** -0.5)
    attn = ops.softmax(logits, axis=-1)
    maps = ghost_head_global(attn, O, S, lam, gamma)
    dv = D // expanded
    vh = ops.transpose(ops.reshape(v, (B, N, expanded, dv)), (0, 2, 1, 3))
    out = ops.einsum("bcij,bcjd->bcid", maps, vh)
    return ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, N, D))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.conf"


def save_elsa_params(params: ElsaParams, directory: Union[str, Path]) -> Path:
    """パラメータをゴールデンテンソルファイル群 + manifest.conf として保存する。"""
    params.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, str] = {}
    for name, value in params.as_params().items():
        filename = f"{name}.latt"
        golden.save_tensor(directory / filename, ops.value_of(value))
        tensors[name] = filename
    manifest = {
        "elsa": {
            "kernel_size": params.kernel_size,
            "heads": params.heads,
            "lam": float(params.lam),
            "gamma": float(params.gamma),
            "grouped": params.grouped,
            "ghost": params.ghost is not None,
            "tensors": tensors,
        }
    }
    path = directory / MANIFEST_NAME
    path.write_text(config_text.dump_config_text(manifest), encoding="utf-8", newline="\n")
    logger.info(f"ELSAパラメータを保存しました: {directory}")
    return path


def load_elsa_params(directory: Union[str, Path]) -> ElsaParams:
    directory = Path(directory)
    document, _ = config_text.load_config_file(directory / MANIFEST_NAME)
    section = document.get("elsa")
    if not isinstance(section, dict) or "tensors" not in section:
        raise ElsaError(f"{directory / MANIFEST_NAME}: elsa.tensors がありません")
    tensors = {name: golden.load_tensor(directory / filename) for name, filename in section["tensors"].items()}
    ghost = None
    if section.get("ghost", False):
        ghost = GhostHeadParams(O=tensors.pop("ghost_O"), S=tensors.pop("ghost_S"))
    params = ElsaParams(
        kernel_size=int(section["kernel_size"]),
        heads=int(section["heads"]),
        lam=float(section.get("lam", 1.0)),
        gamma=float(section.get("gamma", 1.0)),
        grouped=bool(section.get("grouped", False)),
        ghost=ghost,
        **tensors,
    )
    params.validate()
    return params
