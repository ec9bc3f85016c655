"""
Unified local spatial-processing operation.

1つの設定可能な演算で、次をすべて表現する:
- depth-wise convolution（静的フィルタ・近傍適用）
- dynamic filter（画素ごとに生成したフィルタ・近傍適用）
- local self-attention（ウィンドウ内のq·k + 相対位置バイアス + softmax）
- その中間のパラメータ化 Net1〜Net7 と近傍版 Net6N / Net7N

ヘッドgについて画素iの出力は

    f_i = Σ_{j∈Φ(i)} Norm_j( s·q_i·k_j + q_i·r^k_{j−i} + r^q_{j−i}·k_j + r^b_{j−i} ) v_j

で、各項は ParadigmConfig のフラグで有効化する。Φ はウィンドウ分割か K×K 近傍。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.core import ops
from src.core import tensor as T
from src.core.exceptions import (
    ParadigmConfigError,
    TensorShapeError,
    UnknownPresetError,
    WindowSizeError,
)
from src.utils import config as config_text
from src.utils.rng import trunc_normal

logger = logging.getLogger(__name__)


class Norm(str, Enum):
    IDENTITY = "Identity"
    FILTER_NORM = "FilterNorm"
    SOFTMAX = "Softmax"


class NormStatus(str, Enum):
    RAW = "Raw"
    FILTER_NORMED = "FilterNormed"
    SOFTMAX_NORMED = "SoftmaxNormed"


class ApplicationMode(str, Enum):
    WINDOW = "Window"
    NEIGHBORING = "Neighboring"


@dataclass(frozen=True)
class Application:
    """フィルタの適用範囲。Window(Wd) はウィンドウ分割、Neighboring(K) はK×K近傍。"""

    mode: ApplicationMode
    size: int

    @classmethod
    def window(cls, window_size: int) -> "Application":
        return cls(ApplicationMode.WINDOW, window_size)

    @classmethod
    def neighboring(cls, kernel_size: int) -> "Application":
        return cls(ApplicationMode.NEIGHBORING, kernel_size)

    @property
    def is_window(self) -> bool:
        return self.mode is ApplicationMode.WINDOW

    @property
    def table_size(self) -> int:
        """相対位置テーブルの行数 T。"""
        if self.is_window:
            return (2 * self.size - 1) ** 2
        return self.size * self.size

    @property
    def filter_elements(self) -> int:
        """1画素あたりのフィルタ要素数（AttentionMapのT軸の長さ）。"""
        return self.size * self.size

    def __str__(self) -> str:
        return f"{self.mode.value}({self.size})"


@dataclass(frozen=True)
class ParadigmConfig:
    """統一パラダイムの1バリアントの完全な記述。"""

    use_qk: bool
    use_q_rk: bool
    use_rq_k: bool
    use_rb: bool
    norm: Norm
    application: Application
    heads: int
    channels: int
    qk_scale: Optional[float] = None
    pad_mask: bool = False
    filter_norm_eps: float = T.DEFAULT_FILTER_NORM_EPS

    def __post_init__(self) -> None:
        object.__setattr__(self, "norm", Norm(self.norm))
        if not (self.use_qk or self.use_q_rk or self.use_rq_k or self.use_rb):
            raise ParadigmConfigError("4つの項のうち少なくとも1つを有効にする必要があります")
        if self.application.size < 1:
            raise ParadigmConfigError(f"ウィンドウ/カーネルサイズは1以上である必要があります: {self.application.size}")
        if not self.application.is_window and self.application.size % 2 == 0:
            raise ParadigmConfigError(f"近傍モードのカーネルサイズは奇数である必要があります: {self.application.size}")
        if self.heads < 1 or self.channels < 1 or self.channels % self.heads:
            raise ParadigmConfigError(f"ヘッド数 {self.heads} はチャネル数 {self.channels} を割り切る必要があります")
        if self.qk_scale is None:
            object.__setattr__(self, "qk_scale", self.head_dim ** -0.5)

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def table_size(self) -> int:
        return self.application.table_size

    @property
    def unstable(self) -> bool:
        """Identity正規化は学習が発散しやすい。"""
        return self.norm is Norm.IDENTITY

    def with_shape(self, channels: int, heads: int) -> "ParadigmConfig":
        """チャネル数・ヘッド数だけを差し替える（qk_scaleは再計算）。"""
        return replace(self, channels=channels, heads=heads, qk_scale=None)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "use_qk": self.use_qk,
            "use_q_rk": self.use_q_rk,
            "use_rq_k": self.use_rq_k,
            "use_rb": self.use_rb,
            "norm": self.norm.value,
            "application": self.application.mode.value,
            "size": self.application.size,
            "heads": self.heads,
            "channels": self.channels,
            "qk_scale": float(self.qk_scale),
            "pad_mask": self.pad_mask,
            "filter_norm_eps": float(self.filter_norm_eps),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ParadigmConfig":
        try:
            application = Application(ApplicationMode(payload["application"]), int(payload["size"]))
            return cls(
                use_qk=bool(payload["use_qk"]),
                use_q_rk=bool(payload["use_q_rk"]),
                use_rq_k=bool(payload["use_rq_k"]),
                use_rb=bool(payload["use_rb"]),
                norm=Norm(payload["norm"]),
                application=application,
                heads=int(payload["heads"]),
                channels=int(payload["channels"]),
                qk_scale=float(payload["qk_scale"]) if "qk_scale" in payload else None,
                pad_mask=bool(payload.get("pad_mask", False)),
                filter_norm_eps=float(payload.get("filter_norm_eps", T.DEFAULT_FILTER_NORM_EPS)),
            )
        except KeyError as exc:
            raise ParadigmConfigError(f"ParadigmConfigのキーが不足しています: {exc.args[0]}") from exc
        except ValueError as exc:
            raise ParadigmConfigError(f"ParadigmConfigの値が不正です: {exc}") from exc


def paradigm_config_to_text(cfg: ParadigmConfig) -> str:
    return config_text.dump_config_text({"paradigm": cfg.to_dict()})


def paradigm_config_from_text(text: str, source: str = "<string>") -> ParadigmConfig:
    document = config_text.parse_config_text(text, source=source)
    if "paradigm" not in document:
        raise ParadigmConfigError(f"{source}: paradigm セクションがありません")
    return ParadigmConfig.from_dict(document["paradigm"])


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PresetRow:
    use_qk: bool
    use_q_rk: bool
    use_rq_k: bool
    use_rb: bool
    norm: Norm
    mode: ApplicationMode
    depthwise: bool = False

    @property
    def terms(self) -> str:
        names = ("q·k", "q·r^k", "r^q·k", "r^b")
        flags = (self.use_qk, self.use_q_rk, self.use_rq_k, self.use_rb)
        return "+".join(name for name, flag in zip(names, flags) if flag)


_W, _N = ApplicationMode.WINDOW, ApplicationMode.NEIGHBORING

PRESETS: Dict[str, PresetRow] = {
    "Net1": PresetRow(True, False, False, False, Norm.SOFTMAX, _W),
    "Net2": PresetRow(False, True, False, False, Norm.SOFTMAX, _W),
    "Net3": PresetRow(False, False, True, False, Norm.SOFTMAX, _W),
    "Net4": PresetRow(False, False, False, True, Norm.SOFTMAX, _W),
    "Net5": PresetRow(False, True, True, False, Norm.SOFTMAX, _W),
    "Net6": PresetRow(False, True, True, True, Norm.SOFTMAX, _W),
    "Net7": PresetRow(True, True, True, True, Norm.SOFTMAX, _W),
    "SwinLSA": PresetRow(True, False, False, True, Norm.SOFTMAX, _W),
    "Net7FilterNorm": PresetRow(True, True, True, True, Norm.FILTER_NORM, _W),
    "Net7Identity": PresetRow(True, True, True, True, Norm.IDENTITY, _W),
    "DwConv": PresetRow(False, False, False, True, Norm.IDENTITY, _N, depthwise=True),
    "InvolutionLike": PresetRow(False, True, False, False, Norm.IDENTITY, _N),
    "Net6N": PresetRow(False, True, True, True, Norm.SOFTMAX, _N),
    "Net7N": PresetRow(True, True, True, True, Norm.SOFTMAX, _N),
    "SwinLSAN": PresetRow(True, False, False, True, Norm.SOFTMAX, _N),
}

DEFAULT_PRESET_SIZE = 7


def preset_names() -> Tuple[str, ...]:
    return tuple(PRESETS)


def preset(name: str, channels: int = 8, heads: int = 2, size: int = DEFAULT_PRESET_SIZE, pad_mask: bool = False) -> ParadigmConfig:
    """
    名前付きプリセットの ParadigmConfig を返す。

    Args:
        name: プリセット名（Net1〜Net7, SwinLSA, DwConv, InvolutionLike, Net6N, Net7N など）
        channels: チャネル数 C
        heads: ヘッド数 G（DwConvでは常に C に置き換える）
        size: ウィンドウサイズ Wd または カーネルサイズ K

    Raises:
        UnknownPresetError: 未知の名前
    """
    row = PRESETS.get(name)
    if row is None:
        raise UnknownPresetError(f"未知のプリセットです: {name}（候補: {', '.join(PRESETS)}）")
    return ParadigmConfig(
        use_qk=row.use_qk,
        use_q_rk=row.use_q_rk,
        use_rq_k=row.use_rq_k,
        use_rb=row.use_rb,
        norm=row.norm,
        application=Application(row.mode, size),
        heads=channels if row.depthwise else heads,
        channels=channels,
        pad_mask=pad_mask,
    )


# ---------------------------------------------------------------------------
# tables / attention map
# ---------------------------------------------------------------------------

@dataclass
class RelPosTables:
    """相対位置テーブル。無効な項のテーブルはNone。"""

    r_k: Optional[np.ndarray] = None
    r_q: Optional[np.ndarray] = None
    r_b: Optional[np.ndarray] = None

    def validate(self, cfg: ParadigmConfig) -> None:
        d, G, table = cfg.head_dim, cfg.heads, cfg.table_size
        expected = {
            "r_k": ((d, G, table), cfg.use_q_rk),
            "r_q": ((d, G, table), cfg.use_rq_k),
            "r_b": ((G, table), cfg.use_rb),
        }
        for name, (shape, enabled) in expected.items():
            value = getattr(self, name)
            if not enabled:
                continue
            if value is None:
                raise ParadigmConfigError(f"{name} が有効ですがテーブルがありません")
            if tuple(np.shape(ops.value_of(value))) != shape:
                raise TensorShapeError(f"{name} の形状 {np.shape(ops.value_of(value))} が期待値 {shape} と一致しません")

    def as_params(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}{name}": getattr(self, name) for name in ("r_k", "r_q", "r_b") if getattr(self, name) is not None}


def init_tables(cfg: ParadigmConfig, rng: np.random.Generator, dtype=np.float64) -> RelPosTables:
    """有効な項のテーブルを切断正規分布（std 0.02, ±2σ）で初期化する。"""
    d, G, table = cfg.head_dim, cfg.heads, cfg.table_size
    return RelPosTables(
        r_k=trunc_normal(rng, (d, G, table), dtype=dtype) if cfg.use_q_rk else None,
        r_q=trunc_normal(rng, (d, G, table), dtype=dtype) if cfg.use_rq_k else None,
        r_b=trunc_normal(rng, (G, table), dtype=dtype) if cfg.use_rb else None,
    )


@dataclass
class AttentionMap:
    """画素ごとのフィルタ重み (B, G, T, P) と正規化状態。"""

    values: np.ndarray
    normalized: NormStatus
    degenerate: bool = False

    def check(self, sum_tol: float = 1e-5, stat_tol: float = 1e-4) -> bool:
        """宣言された正規化状態を満たしているか。"""
        if self.normalized is NormStatus.SOFTMAX_NORMED:
            return bool(np.all(np.abs(self.values.sum(axis=2) - 1.0) <= sum_tol))
        if self.normalized is NormStatus.FILTER_NORMED:
            if self.degenerate:
                return bool(np.all(self.values == 0))
            mean = self.values.mean(axis=2)
            std = self.values.std(axis=2)
            constant = np.all(self.values == 0, axis=2)
            return bool(np.all(np.abs(mean) <= stat_tol) and np.all(constant | (np.abs(std - 1.0) <= stat_tol)))
        return True


def filter_normalize_map(attn: AttentionMap, eps: float = T.DEFAULT_FILTER_NORM_EPS) -> AttentionMap:
    """AttentionMapのT軸に沿ったフィルタ正規化。T=1なら全0でdegenerateを立てる。"""
    degenerate = attn.values.shape[2] < 2
    return AttentionMap(T.filter_normalize(attn.values, axis=2, eps=eps), NormStatus.FILTER_NORMED, degenerate=degenerate)


@lru_cache(maxsize=None)
def relative_index(window_size: int) -> np.ndarray:
    """ウィンドウ内の画素ペア (i, j) → テーブル行。(Wd², Wd²)、読み取り専用。"""
    coords = np.array([(y, x) for y in range(window_size) for x in range(window_size)])
    delta = coords[None, :, :] - coords[:, None, :]
    span = 2 * window_size - 1
    index = (delta[..., 0] + window_size - 1) * span + (delta[..., 1] + window_size - 1)
    index.setflags(write=False)
    return index


@lru_cache(maxsize=None)
def _neighbor_mask(kernel_size: int, height: int, width: int) -> np.ndarray:
    mask = T.unfold(np.ones((1, 1, height, width)), kernel_size) > 0
    mask = mask.reshape(1, 1, kernel_size * kernel_size, height, width)
    mask.setflags(write=False)
    return mask


def _check_inputs(q, k, v, cfg: ParadigmConfig) -> Tuple[int, int, int, int]:
    shapes = {name: np.shape(ops.value_of(x)) for name, x in (("q", q), ("k", k), ("v", v))}
    if len(set(shapes.values())) != 1:
        raise TensorShapeError(f"q, k, v の形状が一致しません: {shapes}")
    shape = shapes["q"]
    if len(shape) != 4:
        raise TensorShapeError(f"入力は (B, C, H, W) である必要があります: {shape}")
    B, C, H, W = shape
    if C != cfg.channels:
        raise TensorShapeError(f"チャネル数 {C} が設定 {cfg.channels} と一致しません")
    if cfg.application.is_window:
        Wd = cfg.application.size
        if H % Wd or W % Wd:
            raise WindowSizeError(f"ウィンドウサイズ {Wd} が特徴マップ {H}x{W} を割り切りません")
    return B, C, H, W


def _normalize(logits, cfg: ParadigmConfig, axis: int, mask: Optional[np.ndarray] = None):
    dtype = ops.value_of(logits).dtype
    if cfg.norm is Norm.SOFTMAX:
        if mask is not None:
            logits = ops.add(logits, np.where(mask, 0.0, -np.inf).astype(dtype))
        return ops.softmax(logits, axis)
    if cfg.norm is Norm.FILTER_NORM:
        logits = ops.filter_normalize(logits, axis=axis, eps=cfg.filter_norm_eps)
    if mask is not None:
        logits = ops.mul(logits, mask.astype(dtype))
    return logits


def _sum_terms(terms: List[Any]):
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return total


# ---------------------------------------------------------------------------
# neighboring application
# ---------------------------------------------------------------------------

def _neighbor_attention(q, k, tables: RelPosTables, cfg: ParadigmConfig, shape):
    """近傍モードの正規化済みフィルタ (B, G, T, H, W)。"""
    B, C, H, W = shape
    G, d, K = cfg.heads, cfg.head_dim, cfg.application.size
    taps = K * K
    qh = ops.reshape(q, (B, G, d, H, W))
    terms: List[Any] = []
    k_cols = None
    if cfg.use_qk or cfg.use_rq_k:
        k_cols = ops.reshape(ops.unfold(k, K), (B, G, d, taps, H, W))
    if cfg.use_qk:
        terms.append(ops.scale(ops.einsum("bgdhw,bgdthw->bgthw", qh, k_cols), cfg.qk_scale))
    if cfg.use_q_rk:
        terms.append(ops.einsum("bgdhw,dgt->bgthw", qh, tables.r_k))
    if cfg.use_rq_k:
        terms.append(ops.einsum("dgt,bgdthw->bgthw", tables.r_q, k_cols))
    if cfg.use_rb:
        bias = ops.reshape(tables.r_b, (1, G, taps, 1, 1))
        if not terms:
            dtype = ops.value_of(tables.r_b).dtype
            terms.append(np.zeros((B, G, taps, H, W), dtype=dtype))
        terms.append(bias)
    logits = _sum_terms(terms)
    mask = _neighbor_mask(K, H, W) if cfg.pad_mask else None
    return _normalize(logits, cfg, axis=2, mask=mask)


def _neighbor_aggregate(attn, v, cfg: ParadigmConfig, shape):
    B, C, H, W = shape
    G, d, K = cfg.heads, cfg.head_dim, cfg.application.size
    v_cols = ops.reshape(ops.unfold(v, K), (B, G, d, K * K, H, W))
    out = ops.einsum("bgthw,bgdthw->bgdhw", attn, v_cols)
    return ops.reshape(out, (B, C, H, W))


# ---------------------------------------------------------------------------
# window application
# ---------------------------------------------------------------------------

def window_partition(x, heads: int, window_size: int):
    """(B, C, H, W) → (B, G, d, N, Wd²)。Nはウィンドウの行優先、Wd²はウィンドウ内画素の行優先。"""
    B, C, H, W = np.shape(ops.value_of(x))
    d = C // heads
    nh, nw = H // window_size, W // window_size
    x = ops.reshape(x, (B, heads, d, nh, window_size, nw, window_size))
    x = ops.transpose(x, (0, 1, 2, 3, 5, 4, 6))
    return ops.reshape(x, (B, heads, d, nh * nw, window_size * window_size))


def window_merge(x, shape: Tuple[int, int, int, int], heads: int, window_size: int):
    """window_partitionの逆変換。"""
    B, C, H, W = shape
    d = C // heads
    nh, nw = H // window_size, W // window_size
    x = ops.reshape(x, (B, heads, d, nh, nw, window_size, window_size))
    x = ops.transpose(x, (0, 1, 2, 3, 5, 4, 6))
    return ops.reshape(x, (B, C, H, W))


def _gather_table(table, window_size: int):
    """(…, T) のテーブルを (…, Wd², Wd²) のペア行列に展開する。"""
    index = relative_index(window_size)
    size = window_size * window_size
    lead = np.shape(ops.value_of(table))[:-1]
    gathered = ops.take(table, index.reshape(-1), axis=-1)
    return ops.reshape(gathered, lead + (size, size))


def _window_attention(q, k, tables: RelPosTables, cfg: ParadigmConfig, shape):
    """ウィンドウモードの正規化済みフィルタ (B, G, Wd²(j), N, Wd²(i))。"""
    B, C, H, W = shape
    G, Wd = cfg.heads, cfg.application.size
    size = Wd * Wd
    n_windows = (H // Wd) * (W // Wd)
    qw = window_partition(q, G, Wd)
    kw = window_partition(k, G, Wd) if (cfg.use_qk or cfg.use_rq_k) else None
    terms: List[Any] = []
    if cfg.use_qk:
        terms.append(ops.scale(ops.einsum("bgdni,bgdnj->bgjni", qw, kw), cfg.qk_scale))
    if cfg.use_q_rk:
        terms.append(ops.einsum("bgdni,dgij->bgjni", qw, _gather_table(tables.r_k, Wd)))
    if cfg.use_rq_k:
        terms.append(ops.einsum("dgij,bgdnj->bgjni", _gather_table(tables.r_q, Wd), kw))
    if cfg.use_rb:
        pair_bias = ops.transpose(_gather_table(tables.r_b, Wd), (0, 2, 1))
        bias = ops.reshape(pair_bias, (1, G, size, 1, size))
        if not terms:
            dtype = ops.value_of(tables.r_b).dtype
            terms.append(np.zeros((B, G, size, n_windows, size), dtype=dtype))
        terms.append(bias)
    return _normalize(_sum_terms(terms), cfg, axis=2)


def _window_aggregate(attn, v, cfg: ParadigmConfig, shape):
    G, Wd = cfg.heads, cfg.application.size
    vw = window_partition(v, G, Wd)
    out = ops.einsum("bgjni,bgdnj->bgdni", attn, vw)
    return window_merge(out, shape, G, Wd)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _status_for(cfg: ParadigmConfig) -> NormStatus:
    if cfg.norm is Norm.SOFTMAX:
        return NormStatus.SOFTMAX_NORMED
    if cfg.norm is Norm.FILTER_NORM and not (cfg.pad_mask and not cfg.application.is_window):
        return NormStatus.FILTER_NORMED
    return NormStatus.RAW


def compute_attention_map(q: np.ndarray, k: np.ndarray, tables: RelPosTables, cfg: ParadigmConfig) -> AttentionMap:
    """
    正規化済みフィルタを AttentionMap (B, G, T, P) として返す。

    近傍モードでは P = H·W（行優先）、ウィンドウモードでは P = ウィンドウ数 × Wd²。
    """
    shape = _check_inputs(q, k, q, cfg)
    tables.validate(cfg)
    B, C, H, W = shape
    status = _status_for(cfg)
    filter_normed = status is NormStatus.FILTER_NORMED
    logits_cfg = replace(cfg, norm=Norm.IDENTITY) if filter_normed else cfg
    attend = _window_attention if cfg.application.is_window else _neighbor_attention
    values = ops.value_of(attend(q, k, tables, logits_cfg, shape))
    values = np.ascontiguousarray(values.reshape(B, cfg.heads, cfg.application.filter_elements, H * W))
    if filter_normed:
        return filter_normalize_map(AttentionMap(values, NormStatus.RAW), cfg.filter_norm_eps)
    degenerate = cfg.norm is Norm.FILTER_NORM and cfg.application.filter_elements < 2
    return AttentionMap(values, status, degenerate=degenerate)


def unified_forward(q, k, v, tables: RelPosTables, cfg: ParadigmConfig):
    """
    統一パラダイムの順伝播。

    Args:
        q, k, v: (B, C, H, W)（numpy配列またはVar）
        tables: 相対位置テーブル
        cfg: ParadigmConfig

    Returns:
        (B, C, H, W)

    Raises:
        WindowSizeError: ウィンドウサイズが H, W を割り切らない場合
        TensorShapeError: 形状の不一致
    """
    shape = _check_inputs(q, k, v, cfg)
    tables.validate(cfg)
    if cfg.application.is_window:
        out = _window_aggregate(_window_attention(q, k, tables, cfg, shape), v, cfg, shape)
    else:
        out = _neighbor_aggregate(_neighbor_attention(q, k, tables, cfg, shape), v, cfg, shape)
    if not np.all(np.isfinite(ops.value_of(out))):
        logger.warning(f"unified_forward: 出力に非有限値が含まれています（norm={cfg.norm.value}）")
    return out


def dwconv_forward(x, weights):
    """depth-wise畳み込み（ゼロパディング、stride 1）。weights: (C, K, K)"""
    C = np.shape(ops.value_of(x))[1]
    w_shape = np.shape(ops.value_of(weights))
    if len(w_shape) != 3 or w_shape[0] != C:
        raise TensorShapeError(f"重みの形状 {w_shape} がチャネル数 {C} と一致しません")
    return ops.conv2d(x, ops.reshape(weights, (C, 1, w_shape[1], w_shape[2])), groups=C)


def lsa_bias_matrix(bias, window_size: int):
    """(G, (2Wd−1)²) の相対位置バイアス → (G, Wd², Wd²)。"""
    return _gather_table(bias, window_size)


def lsa_forward(q, k, v, bias, window_size: int, scale: float):
    """
    標準的なウィンドウ型マルチヘッド注意（相対位置バイアス付き、シフトなし）。

    ヘッド数は bias の先頭軸から決まる。
    """
    shape = np.shape(ops.value_of(q))
    if len(shape) != 4:
        raise TensorShapeError(f"入力は (B, C, H, W) である必要があります: {shape}")
    B, C, H, W = shape
    Wd = window_size
    if Wd < 1 or H % Wd or W % Wd:
        raise WindowSizeError(f"ウィンドウサイズ {Wd} が特徴マップ {H}x{W} を割り切りません")
    G = np.shape(ops.value_of(bias))[0]
    if C % G:
        raise TensorShapeError(f"ヘッド数 {G} がチャネル数 {C} を割り切りません")
    d = C // G
    nh, nw = H // Wd, W // Wd
    size = Wd * Wd

    def to_tokens(x):
        x = ops.reshape(x, (B, G, d, nh, Wd, nw, Wd))
        x = ops.transpose(x, (0, 3, 5, 1, 4, 6, 2))
        return ops.reshape(x, (B * nh * nw, G, size, d))

    qs, ks, vs = to_tokens(q), to_tokens(k), to_tokens(v)
    logits = ops.scale(ops.einsum("ngid,ngjd->ngij", qs, ks), scale)
    logits = ops.add(logits, ops.reshape(lsa_bias_matrix(bias, Wd), (1, G, size, size)))
    attn = ops.softmax(logits, axis=-1)
    out = ops.einsum("ngij,ngjd->ngid", attn, vs)
    out = ops.reshape(out, (B, nh, nw, G, Wd, Wd, d))
    out = ops.transpose(out, (0, 3, 6, 1, 4, 2, 5))
    return ops.reshape(out, (B, C, H, W))


# ---------------------------------------------------------------------------
# literal-loop evaluators
# ---------------------------------------------------------------------------

def _normalize_reference(logits: np.ndarray, norm: Norm, eps: float, valid: np.ndarray) -> np.ndarray:
    if norm is Norm.SOFTMAX:
        shifted = np.where(valid, logits - logits[valid].max(), -np.inf)
        weights = np.exp(shifted)
        return weights / weights.sum()
    out = logits.copy()
    if norm is Norm.FILTER_NORM:
        if out.size < 2:
            out = np.zeros_like(out)
        else:
            centered = out - out.mean()
            std = np.sqrt((centered ** 2).mean())
            out = centered / (std + eps) if std + eps > 0 else np.zeros_like(out)
    return np.where(valid, out, 0.0)


def unified_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, tables: RelPosTables, cfg: ParadigmConfig) -> np.ndarray:
    """画素ペアを1つずつたどる統一パラダイムの参照実装（遅い、検証用）。"""
    B, C, H, W = _check_inputs(q, k, v, cfg)
    G, d, size = cfg.heads, cfg.head_dim, cfg.application.size
    out = np.zeros((B, C, H, W), dtype=np.result_type(q, k, v))
    for b in range(B):
        for g in range(G):
            channels = slice(g * d, (g + 1) * d)
            for y in range(H):
                for x in range(W):
                    keys: List[Tuple[int, int]] = []
                    rows: List[int] = []
                    valid: List[bool] = []
                    if cfg.application.is_window:
                        y0, x0 = (y // size) * size, (x // size) * size
                        for ky in range(y0, y0 + size):
                            for kx in range(x0, x0 + size):
                                keys.append((ky, kx))
                                rows.append((ky - y + size - 1) * (2 * size - 1) + (kx - x + size - 1))
                                valid.append(True)
                    else:
                        r = size // 2
                        for dy in range(-r, r + 1):
                            for dx in range(-r, r + 1):
                                keys.append((y + dy, x + dx))
                                rows.append((dy + r) * size + (dx + r))
                                inside = 0 <= y + dy < H and 0 <= x + dx < W
                                valid.append(inside or not cfg.pad_mask)
                    q_i = q[b, channels, y, x]
                    logits = np.zeros(len(keys), dtype=out.dtype)
                    values = np.zeros((len(keys), d), dtype=out.dtype)
                    for n, ((ky, kx), row) in enumerate(zip(keys, rows)):
                        inside = 0 <= ky < H and 0 <= kx < W
                        k_j = k[b, channels, ky, kx] if inside else np.zeros(d)
                        values[n] = v[b, channels, ky, kx] if inside else 0.0
                        total = 0.0
                        if cfg.use_qk:
                            total += cfg.qk_scale * float(np.dot(q_i, k_j))
                        if cfg.use_q_rk:
                            total += float(np.dot(q_i, tables.r_k[:, g, row]))
                        if cfg.use_rq_k:
                            total += float(np.dot(tables.r_q[:, g, row], k_j))
                        if cfg.use_rb:
                            total += float(tables.r_b[g, row])
                        logits[n] = total
                    weights = _normalize_reference(logits, cfg.norm, cfg.filter_norm_eps, np.array(valid))
                    out[b, channels, y, x] = weights @ values
    return out


def dynamic_filter_reference(q: np.ndarray, v: np.ndarray, generator: np.ndarray, kernel_size: int) -> np.ndarray:
    """
    画素ごとに生成したフィルタを近傍へ適用する dynamic filter の参照実装。

    ヘッドgの画素iのフィルタは w_i[t] = Σ_d q[g·d_h + d, i]·generator[d, g, t]（1×1の生成経路）、
    出力は f_i = Σ_t w_i[t]·v[i + offset_t]（範囲外は0）。

    Args:
        q: 生成経路の入力 (B, C, H, W)
        v: フィルタを適用する特徴 (B, C, H, W)
        generator: (d_h, G, K*K)
        kernel_size: K
    """
    B, C, H, W = q.shape
    d, G, taps = generator.shape
    if d * G != C or taps != kernel_size * kernel_size:
        raise TensorShapeError(f"generatorの形状 {generator.shape} が C={C}, K={kernel_size} と一致しません")
    order = T.offset_order(kernel_size)
    out = np.zeros_like(v)
    for b in range(B):
        for g in range(G):
            channels = slice(g * d, (g + 1) * d)
            for y in range(H):
                for x in range(W):
                    filt = q[b, channels, y, x] @ generator[:, g, :]
                    acc = np.zeros(d, dtype=v.dtype)
                    for t, (dy, dx) in enumerate(order.offsets):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < H and 0 <= xx < W:
                            acc += filt[t] * v[b, channels, yy, xx]
                    out[b, channels, y, x] = acc
    return out


def preset_table_rows() -> List[Dict[str, Any]]:
    """CLIの presets 表示用。"""
    rows = []
    for name, row in PRESETS.items():
        rows.append(
            {
                "name": name,
                "use_qk": row.use_qk,
                "use_q_rk": row.use_q_rk,
                "use_rq_k": row.use_rq_k,
                "use_rb": row.use_rb,
                "norm": row.norm.value,
                "application": row.mode.value,
                "terms": row.terms,
                "unstable": row.norm is Norm.IDENTITY,
            }
        )
    return rows
