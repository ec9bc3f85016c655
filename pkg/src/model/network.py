"""
Miniature hierarchical classifier with a pluggable spatial mixer.

patch embed → [stage: blocks × (LN → mixer → residual → LN → MLP → residual)] → 2×2 patch merging → …
→ LN → global average pool → linear head

mixer は LSA / DwConv / Unified(preset) / ELSA のいずれか。どの mixer でもブロック境界の
活性の形状は同じ (B, C, H, W)。
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.core import elsa, ops, paradigm
from src.core.exceptions import ModelConfigError, UnknownPresetError
from src.core.tensor import resolve_dtype
from src.utils.rng import normal, stream, trunc_normal

logger = logging.getLogger(__name__)

MIXERS = ("LSA", "DwConv", "Unified", "ELSA")
HEAD_SETTINGS = ("One", "OneX", "TwoX", "C")
LN_EPS = 1e-5


@dataclass
class StageConfig:
    """1ステージの構成。window_or_kernel は LSA/ウィンドウ系ではウィンドウサイズ、それ以外はカーネルサイズ。"""

    blocks: int
    channels: int
    heads: int
    mixer: str = "LSA"
    window_or_kernel: int = 7
    preset: str = "Net7"
    variant: str = "StrictUnfold"
    elsa_grouped: bool = False

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "StageConfig":
        unknown = set(payload) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelConfigError(f"未知のステージ設定キーです: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class ModelConfig:
    """モデル全体の構成。head_setting はステージごとのヘッド数を書き換える。"""

    stages: List[StageConfig]
    patch_size: int = 4
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    head_setting: str = "OneX"
    mlp_ratio: int = 4
    lam: float = 1.0
    gamma: float = 1.0
    ghost: bool = True

    def resolved_stages(self) -> List[StageConfig]:
        """head_setting を適用したステージ列。One=1, OneX=設定値, TwoX=2倍, C=チャネル数。"""
        if self.head_setting not in HEAD_SETTINGS:
            raise ModelConfigError(f"未知のhead_settingです: {self.head_setting}（候補: {', '.join(HEAD_SETTINGS)}）")
        stages = []
        for stage in self.stages:
            heads = {
                "One": 1,
                "OneX": stage.heads,
                "TwoX": 2 * stage.heads,
                "C": stage.channels,
            }[self.head_setting]
            stages.append(replace(stage, heads=heads))
        return stages

    def stage_resolution(self, index: int) -> int:
        return self.image_size // self.patch_size // (2 ** index)

    def validate(self) -> None:
        if not self.stages:
            raise ModelConfigError("ステージが1つもありません")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ModelConfigError(f"画像サイズ {self.image_size} はパッチサイズ {self.patch_size} で割り切れる必要があります")
        for index, stage in enumerate(self.resolved_stages()):
            where = f"stages.{index}"
            if stage.blocks < 1:
                raise ModelConfigError(f"{where}: blocks は1以上である必要があります")
            if stage.heads < 1 or stage.channels % stage.heads:
                raise ModelConfigError(f"{where}: ヘッド数 {stage.heads} がチャネル数 {stage.channels} を割り切りません")
            if stage.mixer not in MIXERS:
                raise ModelConfigError(f"{where}: 未知のmixerです: {stage.mixer}（候補: {', '.join(MIXERS)}）")
            if stage.mixer == "Unified" and stage.preset not in paradigm.PRESETS:
                raise UnknownPresetError(f"{where}: 未知のプリセットです: {stage.preset}")
            size = self.stage_resolution(index)
            if size < 1 or (index > 0 and self.stage_resolution(index - 1) % 2):
                raise ModelConfigError(f"{where}: 特徴マップを2×2でダウンサンプルできません")
            if _uses_window(stage) and size % stage.window_or_kernel:
                raise ModelConfigError(f"{where}: ウィンドウサイズ {stage.window_or_kernel} が解像度 {size} を割り切りません")
            if not _uses_window(stage) and stage.window_or_kernel % 2 == 0:
                raise ModelConfigError(f"{where}: カーネルサイズは奇数である必要があります: {stage.window_or_kernel}")
            if stage.mixer == "ELSA":
                elsa.resolve_variant(stage.variant)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["stages"] = [asdict(stage) for stage in self.stages]
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ModelConfig":
        data = dict(payload)
        if "stages" not in data:
            raise ModelConfigError("model.stages がありません")
        stages = [StageConfig.from_dict(stage) for stage in data.pop("stages")]
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelConfigError(f"未知のモデル設定キーです: {sorted(unknown)}")
        return cls(stages=stages, **data)


def _uses_window(stage: StageConfig) -> bool:
    if stage.mixer == "LSA":
        return True
    if stage.mixer == "Unified":
        row = paradigm.PRESETS.get(stage.preset)
        return row is not None and row.mode is paradigm.ApplicationMode.WINDOW
    return False


def unified_config(stage: StageConfig) -> paradigm.ParadigmConfig:
    return paradigm.preset(stage.preset, channels=stage.channels, heads=stage.heads, size=stage.window_or_kernel)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    shape: Tuple[int, ...]
    init: str = "trunc_normal"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _linear(specs: Dict[str, ParamSpec], prefix: str, out_dim: int, in_dim: int, bias: bool = True) -> None:
    specs[f"{prefix}.weight"] = ParamSpec((out_dim, in_dim))
    if bias:
        specs[f"{prefix}.bias"] = ParamSpec((out_dim,), "zeros")


def _norm(specs: Dict[str, ParamSpec], prefix: str, dim: int) -> None:
    specs[f"{prefix}.weight"] = ParamSpec((dim,), "ones")
    specs[f"{prefix}.bias"] = ParamSpec((dim,), "zeros")


def _projections(specs: Dict[str, ParamSpec], prefix: str, C: int, names=("q", "k", "v", "out")) -> None:
    for name in names:
        specs[f"{prefix}.proj_{name}"] = ParamSpec((C, C))
        specs[f"{prefix}.bias_{name}"] = ParamSpec((C,), "zeros")


def _mixer_specs(specs: Dict[str, ParamSpec], prefix: str, stage: StageConfig, cfg: ModelConfig) -> None:
    C, G, size = stage.channels, stage.heads, stage.window_or_kernel
    if stage.mixer == "LSA":
        _projections(specs, prefix, C)
        specs[f"{prefix}.rel_bias"] = ParamSpec((G, (2 * size - 1) ** 2))
    elif stage.mixer == "DwConv":
        _projections(specs, prefix, C, names=("v",))
        specs[f"{prefix}.dw_weight"] = ParamSpec((C, size, size))
        specs[f"{prefix}.dw_bias"] = ParamSpec((C,), "zeros")
        _projections(specs, prefix, C, names=("out",))
    elif stage.mixer == "Unified":
        pcfg = unified_config(stage)
        _projections(specs, prefix, C)
        table = pcfg.table_size
        if pcfg.use_q_rk:
            specs[f"{prefix}.r_k"] = ParamSpec((pcfg.head_dim, pcfg.heads, table))
        if pcfg.use_rq_k:
            specs[f"{prefix}.r_q"] = ParamSpec((pcfg.head_dim, pcfg.heads, table))
        if pcfg.use_rb:
            specs[f"{prefix}.r_b"] = ParamSpec((pcfg.heads, table))
    else:
        taps = size * size
        rows = C // G if stage.elsa_grouped else C
        _projections(specs, prefix, C)
        specs[f"{prefix}.r_k_h"] = ParamSpec((rows, G, taps))
        specs[f"{prefix}.r_q_h"] = ParamSpec((rows, G, taps))
        specs[f"{prefix}.r_b_h"] = ParamSpec((G, taps))
        if cfg.ghost:
            specs[f"{prefix}.ghost_O"] = ParamSpec((C, size, size), "normal")
            specs[f"{prefix}.ghost_S"] = ParamSpec((C, size, size))


def param_specs(cfg: ModelConfig) -> Dict[str, ParamSpec]:
    """全パラメータの名前 → 形状・初期化方法（順序は順伝播の順）。"""
    cfg.validate()
    stages = cfg.resolved_stages()
    specs: Dict[str, ParamSpec] = {}
    first = stages[0].channels
    specs["patch_embed.weight"] = ParamSpec((first, cfg.in_channels, cfg.patch_size, cfg.patch_size))
    specs["patch_embed.bias"] = ParamSpec((first,), "zeros")
    _norm(specs, "patch_norm", first)
    for s, stage in enumerate(stages):
        C = stage.channels
        hidden = cfg.mlp_ratio * C
        for b in range(stage.blocks):
            prefix = f"stages.{s}.blocks.{b}"
            _norm(specs, f"{prefix}.norm1", C)
            _mixer_specs(specs, f"{prefix}.mixer", stage, cfg)
            _norm(specs, f"{prefix}.norm2", C)
            _linear(specs, f"{prefix}.mlp.fc1", hidden, C)
            _linear(specs, f"{prefix}.mlp.fc2", C, hidden)
        if s + 1 < len(stages):
            _norm(specs, f"stages.{s}.downsample.norm", 4 * C)
            _linear(specs, f"stages.{s}.downsample.reduction", stages[s + 1].channels, 4 * C, bias=False)
    last = stages[-1].channels
    _norm(specs, "norm", last)
    _linear(specs, "head", cfg.num_classes, last)
    return specs


def init_params(cfg: ModelConfig, seed: int, dtype="f32") -> Dict[str, np.ndarray]:
    """seedから決定的にパラメータを初期化する。"""
    dtype = resolve_dtype(dtype)
    rng = stream(seed, "model.init")
    params: Dict[str, np.ndarray] = {}
    for name, spec in param_specs(cfg).items():
        if spec.init == "zeros":
            params[name] = np.zeros(spec.shape, dtype=dtype)
        elif spec.init == "ones":
            params[name] = np.ones(spec.shape, dtype=dtype)
        elif spec.init == "normal":
            params[name] = normal(rng, spec.shape, dtype=dtype)
        else:
            params[name] = trunc_normal(rng, spec.shape, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _layer_norm(params: Mapping[str, Any], prefix: str, x):
    return ops.layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], axis=1, eps=LN_EPS)


def _pointwise(params: Mapping[str, Any], prefix: str, x, bias: bool = True):
    out = ops.einsum("oc,bchw->bohw", params[f"{prefix}.weight"], x)
    if bias:
        b = params[f"{prefix}.bias"]
        out = ops.add(out, ops.reshape(b, (1, np.shape(ops.value_of(b))[0], 1, 1)))
    return out


def _project(params: Mapping[str, Any], prefix: str, name: str, x):
    return elsa.project(x, params[f"{prefix}.proj_{name}"], params.get(f"{prefix}.bias_{name}"))


def _mixer_forward(params: Mapping[str, Any], prefix: str, stage: StageConfig, cfg: ModelConfig, x):
    if stage.mixer == "LSA":
        q, k, v = (_project(params, prefix, name, x) for name in ("q", "k", "v"))
        d = stage.channels // stage.heads
        mixed = paradigm.lsa_forward(q, k, v, params[f"{prefix}.rel_bias"], stage.window_or_kernel, d ** -0.5)
        return _project(params, prefix, "out", mixed)
    if stage.mixer == "DwConv":
        v = _project(params, prefix, "v", x)
        mixed = paradigm.dwconv_forward(v, params[f"{prefix}.dw_weight"])
        mixed = ops.add(mixed, ops.reshape(params[f"{prefix}.dw_bias"], (1, stage.channels, 1, 1)))
        return _project(params, prefix, "out", mixed)
    if stage.mixer == "Unified":
        pcfg = unified_config(stage)
        q, k, v = (_project(params, prefix, name, x) for name in ("q", "k", "v"))
        tables = paradigm.RelPosTables(
            r_k=params.get(f"{prefix}.r_k"), r_q=params.get(f"{prefix}.r_q"), r_b=params.get(f"{prefix}.r_b")
        )
        mixed = paradigm.unified_forward(q, k, v, tables, pcfg)
        return _project(params, prefix, "out", mixed)
    ghost = None
    if cfg.ghost:
        ghost = elsa.GhostHeadParams(O=params[f"{prefix}.ghost_O"], S=params[f"{prefix}.ghost_S"])
    block = elsa.ElsaParams(
        proj_q=params[f"{prefix}.proj_q"], proj_k=params[f"{prefix}.proj_k"],
        proj_v=params[f"{prefix}.proj_v"], proj_out=params[f"{prefix}.proj_out"],
        bias_q=params[f"{prefix}.bias_q"], bias_k=params[f"{prefix}.bias_k"],
        bias_v=params[f"{prefix}.bias_v"], bias_out=params[f"{prefix}.bias_out"],
        r_k_h=params[f"{prefix}.r_k_h"], r_q_h=params[f"{prefix}.r_q_h"], r_b_h=params[f"{prefix}.r_b_h"],
        kernel_size=stage.window_or_kernel, heads=stage.heads, ghost=ghost,
        lam=cfg.lam, gamma=cfg.gamma, grouped=stage.elsa_grouped,
    )
    return elsa.elsa_forward(x, block, stage.variant)


def _patch_embed(params: Mapping[str, Any], cfg: ModelConfig, images):
    B, Cin, H, W = np.shape(ops.value_of(images))
    p = cfg.patch_size
    patches = ops.reshape(images, (B, Cin, H // p, p, W // p, p))
    out = ops.einsum("bchpwq,ocpq->bohw", patches, params["patch_embed.weight"])
    C = np.shape(ops.value_of(params["patch_embed.bias"]))[0]
    out = ops.add(out, ops.reshape(params["patch_embed.bias"], (1, C, 1, 1)))
    return _layer_norm(params, "patch_norm", out)


def _downsample(params: Mapping[str, Any], prefix: str, x):
    B, C, H, W = np.shape(ops.value_of(x))
    x = ops.reshape(x, (B, C, H // 2, 2, W // 2, 2))
    x = ops.transpose(x, (0, 3, 5, 1, 2, 4))
    x = ops.reshape(x, (B, 4 * C, H // 2, W // 2))
    x = _layer_norm(params, f"{prefix}.norm", x)
    return _pointwise(params, f"{prefix}.reduction", x, bias=False)


def forward(cfg: ModelConfig, params: Mapping[str, Any], images, trace: Optional[List[Tuple[str, Tuple[int, ...]]]] = None):
    """
    ロジット (B, num_classes) を返す。params の値は numpy 配列でも Var でもよい。

    trace を渡すと、各ブロック境界の (名前, 形状) を追記する。
    """
    shape = np.shape(ops.value_of(images))
    if len(shape) != 4 or shape[1] != cfg.in_channels or shape[2] != cfg.image_size or shape[3] != cfg.image_size:
        raise ModelConfigError(
            f"入力 {shape} が (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}) ではありません"
        )
    stages = cfg.resolved_stages()
    x = _patch_embed(params, cfg, images)
    for s, stage in enumerate(stages):
        for b in range(stage.blocks):
            prefix = f"stages.{s}.blocks.{b}"
            y = _mixer_forward(params, f"{prefix}.mixer", stage, cfg, _layer_norm(params, f"{prefix}.norm1", x))
            x = ops.add(x, y)
            y = _pointwise(params, f"{prefix}.mlp.fc1", _layer_norm(params, f"{prefix}.norm2", x))
            y = _pointwise(params, f"{prefix}.mlp.fc2", ops.gelu(y))
            x = ops.add(x, y)
            if trace is not None:
                trace.append((prefix, tuple(np.shape(ops.value_of(x)))))
        if s + 1 < len(stages):
            x = _downsample(params, f"stages.{s}.downsample", x)
    x = _layer_norm(params, "norm", x)
    pooled = ops.mean(x, axis=(2, 3))
    logits = ops.einsum("oc,bc->bo", params["head.weight"], pooled)
    return ops.add(logits, params["head.bias"])


@dataclass
class Model:
    """ModelConfig と初期化済みパラメータの組。"""

    config: ModelConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def mixer_param_names(self) -> List[str]:
        return [name for name in self.params if ".mixer." in name]

    def forward(self, images, params: Optional[Mapping[str, Any]] = None, trace=None):
        return forward(self.config, self.params if params is None else params, images, trace=trace)

    def loss(self, images, labels, params: Optional[Mapping[str, Any]] = None):
        return ops.cross_entropy(self.forward(images, params), labels)

    def predict(self, images) -> np.ndarray:
        return np.argmax(ops.value_of(self.forward(images)), axis=1)


def build_model(cfg: ModelConfig, seed: int, dtype="f32") -> Model:
    """
    モデルを構築する。

    Raises:
        ModelConfigError: ヘッド数とチャネル数の不整合など
    """
    params = init_params(cfg, seed, dtype=dtype)
    model = Model(config=cfg, params=params)
    logger.debug(f"モデルを構築しました: パラメータ数 {model.param_count:,}")
    return model


def tiny_config(mixer: str = "ELSA", **overrides: Any) -> ModelConfig:
    """デモ用の小型構成（32×32 → 8×8 C=16 → 4×4 C=32）。"""
    size = 4 if mixer == "LSA" else 3
    stage_kwargs: Dict[str, Any] = {"mixer": mixer, "window_or_kernel": size}
    if mixer == "ELSA":
        stage_kwargs["variant"] = "MergedConv"
    stages = [
        StageConfig(blocks=1, channels=16, heads=2, **stage_kwargs),
        StageConfig(blocks=1, channels=32, heads=4, **stage_kwargs),
    ]
    return ModelConfig(stages=stages, **overrides)


def swin_t_config(name: str) -> ModelConfig:
    """Swin-T レイアウト（深さ 2/2/6/2、チャネル 96/192/384/768、ヘッド 3/6/12/24、224×224）。"""
    depths, channels, heads = (2, 2, 6, 2), (96, 192, 384, 768), (3, 6, 12, 24)

    def stage(index: int, **kwargs: Any) -> StageConfig:
        return StageConfig(blocks=depths[index], channels=channels[index], heads=heads[index], window_or_kernel=7, **kwargs)

    if name == "SwinT_LSA":
        stages = [stage(i, mixer="LSA") for i in range(4)]
        ghost = True
    elif name in ("SwinT_ELSA", "SwinT_ELSA_HA_only"):
        stages = [stage(i, mixer="ELSA", variant="MergedConv", elsa_grouped=True) for i in range(3)]
        stages.append(stage(3, mixer="LSA"))
        ghost = name == "SwinT_ELSA"
    elif name == "SwinT_DwConv":
        stages = [stage(i, mixer="DwConv") for i in range(4)]
        ghost = True
    else:
        raise KeyError(name)
    return ModelConfig(stages=stages, num_classes=1000, image_size=224, ghost=ghost)


__all__ = [
    "MIXERS",
    "HEAD_SETTINGS",
    "StageConfig",
    "ModelConfig",
    "ParamSpec",
    "Model",
    "param_specs",
    "init_params",
    "forward",
    "build_model",
    "tiny_config",
    "swin_t_config",
]
