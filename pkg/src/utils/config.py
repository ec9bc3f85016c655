"""
Structured key-value configuration.

テキスト形式:
    # コメント
    command = equiv
    seed = 7
    shapes = [2x8x6x6, 1x4x4x4]
    model.stages.0.channels = 16

- 1行に1つの `dotted.key = value`
- 値は int / float / bool / 文字列（裸またはダブルクォート）/ フラットなリスト `[a, b]`
- 数値のキーセグメントはリストの添字になる（0から連番であること）

優先順位: 組み込みデフォルト < .env / 環境変数 < 設定ファイル < CLIフラグ
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from src.core.exceptions import ConfigError

logger = logging.getLogger(__name__)

try:
    import jsonschema  # type: ignore
except ImportError:  # pragma: no cover - optional dependency
    jsonschema = None  # type: ignore

try:
    from dotenv import load_dotenv  # type: ignore
except ImportError:  # pragma: no cover - optional dependency
    def load_dotenv() -> None:  # type: ignore
        return None

PROJECT_ROOT = Path(__file__).resolve().parents[2]
RUN_CONFIG_SCHEMA_PATH = PROJECT_ROOT / "schemas" / "run_config.schema.json"

COMMANDS = ("equiv", "gradcheck", "bench", "flops", "train", "presets")

_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$")
_BARE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-/]*$")
_KEY_RE = re.compile(r"^[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*$")


# ---------------------------------------------------------------------------
# value parsing / formatting
# ---------------------------------------------------------------------------

def parse_scalar(raw: str) -> Any:
    text = raw.strip()
    if text.startswith('"'):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"文字列リテラルが不正です: {text}") from exc
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if _INT_RE.match(text):
        return int(text)
    if _FLOAT_RE.match(text):
        return float(text)
    if not text:
        raise ValueError("値が空です")
    return text


def parse_value(raw: str) -> Any:
    """設定値の文字列を Python 値に変換する。"""
    text = raw.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ValueError(f"リストが閉じていません: {text}")
        inner = text[1:-1].strip()
        if not inner:
            return []
        if "[" in inner:
            raise ValueError("入れ子のリストは未対応です")
        items = next(csv.reader([inner], skipinitialspace=True, quotechar='"'))
        return [parse_scalar(json.dumps(item) if _needs_quotes(item) else item) for item in items]
    return parse_scalar(text)


def _needs_quotes(item: str) -> bool:
    return bool(item) and not (_INT_RE.match(item) or _FLOAT_RE.match(item) or _BARE_RE.match(item)
                               or item.lower() in ("true", "false"))


def format_value(value: Any) -> str:
    """parse_valueの逆変換。"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        if _BARE_RE.match(value) and value.lower() not in ("true", "false"):
            return value
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(item) for item in value) + "]"
    raise ConfigError(f"設定値として書き出せない型です: {type(value).__name__}")


# ---------------------------------------------------------------------------
# document parsing
# ---------------------------------------------------------------------------

def _listify(node: Any, path: str) -> Any:
    if not isinstance(node, dict):
        return node
    converted = {key: _listify(value, f"{path}.{key}" if path else str(key)) for key, value in node.items()}
    int_keys = [key for key in converted if isinstance(key, int)]
    if not int_keys:
        return converted
    if len(int_keys) != len(converted) or sorted(int_keys) != list(range(len(int_keys))):
        raise ConfigError(f"リスト添字は0からの連番である必要があります: {path}", key=path)
    return [converted[index] for index in range(len(int_keys))]


def set_dotted(document: Dict[Any, Any], key: str, value: Any) -> None:
    """ドット区切りキーで入れ子辞書に値を設定する（数値セグメントは添字）。"""
    if not _KEY_RE.match(key):
        raise ConfigError(f"キーの形式が不正です: {key}", key=key)
    parts: List[Any] = [int(part) if part.isdigit() else part for part in key.split(".")]
    node: Any = document
    for depth, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            if not isinstance(part, int) or part > len(node):
                raise ConfigError(f"リスト添字が範囲外です: {key}", key=key)
            if part == len(node):
                node.append({})
            node = node[part]
            continue
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        elif not isinstance(child, (dict, list)):
            raise ConfigError(f"{'.'.join(map(str, parts[:depth + 1]))} は値であり、入れ子にできません", key=key)
        node = child
    last = parts[-1]
    if isinstance(node, list):
        if not isinstance(last, int) or last > len(node):
            raise ConfigError(f"リスト添字が範囲外です: {key}", key=key)
        if last == len(node):
            node.append(value)
        else:
            node[last] = value
    else:
        node[last] = value


def get_dotted(document: Mapping[str, Any], key: str, default: Any = None) -> Any:
    node: Any = document
    for part in key.split("."):
        if isinstance(node, list) and part.isdigit() and int(part) < len(node):
            node = node[int(part)]
        elif isinstance(node, Mapping) and part in node:
            node = node[part]
        else:
            return default
    return node


def parse_config_text(
    text: str,
    source: str = "<string>",
    lines: Optional[Dict[str, int]] = None,
) -> Dict[str, Any]:
    """
    設定テキストを入れ子辞書に変換する。

    Args:
        text: 設定テキスト
        source: エラーメッセージ用のファイル名
        lines: 指定時、キー → 行番号を書き込む

    Raises:
        ConfigError: 構文エラー、キー重複、値の解析失敗
    """
    raw: Dict[Any, Any] = {}
    seen: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: 'key = value' の形式ではありません", line=lineno)
        key, _, value_text = stripped.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise ConfigError(f"{source}:{lineno}: キーの形式が不正です: {key!r}", line=lineno, key=key)
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: キー {key} が重複しています（最初は{seen[key]}行目）", line=lineno, key=key)
        try:
            value = parse_value(value_text)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {key} の値を解析できません: {exc}", line=lineno, key=key) from exc
        seen[key] = lineno
        node = raw
        parts: List[Any] = [int(part) if part.isdigit() else part for part in key.split(".")]
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{source}:{lineno}: {key} は既存の値と衝突します", line=lineno, key=key)
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"{source}:{lineno}: {key} は既存のセクションと衝突します", line=lineno, key=key)
        node[parts[-1]] = value
    if lines is not None:
        lines.update(seen)
    return _listify(raw, "")


def flatten_config(document: Mapping[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    """入れ子辞書を (dotted key, 値) の列に展開する。スカラーのリストは値として残す。"""
    items: List[Tuple[str, Any]] = []
    for key, value in document.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            items.extend(flatten_config(value, dotted))
        elif isinstance(value, list) and value and all(isinstance(item, Mapping) for item in value):
            for index, item in enumerate(value):
                items.extend(flatten_config(item, f"{dotted}.{index}"))
        elif value is None:
            continue
        else:
            items.append((dotted, value))
    return items


def dump_config_text(document: Mapping[str, Any]) -> str:
    return "".join(f"{key} = {format_value(value)}\n" for key, value in flatten_config(document))


def load_config_file(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, int]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"設定ファイルが見つかりません: {path}")
    lines: Dict[str, int] = {}
    document = parse_config_text(path.read_text(encoding="utf-8"), source=str(path), lines=lines)
    return document, lines


def apply_override(document: Dict[str, Any], assignment: str) -> None:
    """`--set dotted.key=value` 形式の上書きを適用する。"""
    key, sep, value_text = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set は key=value の形式で指定してください: {assignment}")
    key = key.strip()
    try:
        value = parse_value(value_text)
    except ValueError as exc:
        raise ConfigError(f"--set {key} の値を解析できません: {exc}", key=key) from exc
    set_dotted(document, key, value)


# ---------------------------------------------------------------------------
# schema / environment
# ---------------------------------------------------------------------------

def load_schema(schema_path: Path = RUN_CONFIG_SCHEMA_PATH) -> Dict[str, Any]:
    return json.loads(schema_path.read_text(encoding="utf-8"))


def validate_config(
    document: Mapping[str, Any],
    schema: Optional[Mapping[str, Any]] = None,
    lines: Optional[Mapping[str, int]] = None,
) -> None:
    """jsonschemaで検証し、最初のエラーをキーと行番号付きのConfigErrorにする。"""
    if jsonschema is None:
        raise ConfigError("jsonschema が未インストールのため検証できません。`pip install jsonschema` を実行してください。")
    validator = jsonschema.Draft7Validator(schema or load_schema())
    errors = sorted(validator.iter_errors(document), key=lambda err: list(map(str, err.absolute_path)))
    if not errors:
        return
    error = errors[0]
    key = ".".join(str(part) for part in error.absolute_path)
    if not key and error.validator == "additionalProperties":
        unexpected = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        key = unexpected[0] if unexpected else ""
    line = _line_for(key, lines or {})
    location = f"{line}行目 " if line else ""
    raise ConfigError(f"設定が不正です: {location}{key or '(root)'}: {error.message}", line=line, key=key or None)


def _line_for(key: str, lines: Mapping[str, int]) -> Optional[int]:
    if key in lines:
        return lines[key]
    candidates = [lineno for dotted, lineno in lines.items() if dotted.startswith(f"{key}.")]
    return min(candidates) if candidates else None


def env_defaults() -> Dict[str, Any]:
    """.env / 環境変数からの既定値（LATTICE_SEED, LATTICE_DTYPE, LATTICE_OUT_DIR）。"""
    load_dotenv()
    defaults: Dict[str, Any] = {}
    seed = os.getenv("LATTICE_SEED", "").strip()
    if seed:
        if not _INT_RE.match(seed):
            raise ConfigError(f"LATTICE_SEED は整数である必要があります: {seed}", key="seed")
        defaults["seed"] = int(seed)
    dtype = os.getenv("LATTICE_DTYPE", "").strip()
    if dtype:
        defaults["dtype"] = dtype
    out_dir = os.getenv("LATTICE_OUT_DIR", "").strip()
    if out_dir:
        defaults["out"] = out_dir
    return defaults


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

def parse_shape(text: str) -> Tuple[int, ...]:
    """'2x8x6x6' → (2, 8, 6, 6)"""
    try:
        dims = tuple(int(part) for part in str(text).lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"形状の形式が不正です（例: 2x8x6x6）: {text}", key="shapes") from exc
    if len(dims) != 4 or any(dim < 1 for dim in dims):
        raise ConfigError(f"形状は4つの正の整数 BxCxHxW である必要があります: {text}", key="shapes")
    return dims


def format_shape(dims: Tuple[int, ...]) -> str:
    return "x".join(str(dim) for dim in dims)


@dataclass
class RunConfig:
    """CLIの1回の実行を完全に記述する設定。"""

    command: str
    seed: int = 0
    dtype: str = "f64"
    out: str = "runs"
    shapes: List[str] = field(default_factory=list)
    kernel_sizes: List[int] = field(default_factory=list)
    heads: List[int] = field(default_factory=list)
    variants: List[str] = field(default_factory=list)
    presets: List[str] = field(default_factory=list)
    instances: int = 1
    tolerance: Optional[float] = None
    repeats: int = 3
    architectures: List[str] = field(default_factory=list)
    resolution: int = 224
    flop_convention: str = "mac"
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    dataset: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        return {key: value for key, value in payload.items() if value is not None and value != {}}

    def to_text(self) -> str:
        return dump_config_text(self.to_dict())

    @property
    def shape_tuples(self) -> List[Tuple[int, ...]]:
        return [parse_shape(text) for text in self.shapes]

    @classmethod
    def from_dict(cls, document: Mapping[str, Any], lines: Optional[Mapping[str, int]] = None) -> "RunConfig":
        validate_config(document, lines=lines)
        known = {item.name for item in fields(cls)}
        config = cls(**{key: value for key, value in document.items() if key in known})
        for text in config.shapes:
            parse_shape(text)
        return config

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunConfig":
        lines: Dict[str, int] = {}
        document = parse_config_text(text, source=source, lines=lines)
        return cls.from_dict(document, lines=lines)


def default_run_config(command: str) -> Dict[str, Any]:
    """コマンドごとの組み込みデフォルト（設定ファイルが無い場合もそのまま実行できる）。"""
    if command not in COMMANDS:
        raise ConfigError(f"未知のコマンドです: {command}", key="command")
    base: Dict[str, Any] = {"command": command, "seed": 0, "dtype": "f64", "out": "runs"}
    if command == "equiv":
        base.update(
            shapes=["2x8x6x6", "1x4x5x7", "2x12x8x8", "4x64x14x14"],
            kernel_sizes=[3, 5, 7],
            heads=[2, 4],
            variants=["StrictUnfold", "ShiftConv", "MergedConv", "Production"],
            presets=["DwConv", "SwinLSA", "InvolutionLike"],
            instances=10,
        )
    elif command == "gradcheck":
        base.update(shapes=["1x4x4x4"], kernel_sizes=[3], heads=[2], instances=1)
    elif command == "bench":
        base.update(
            dtype="f32",
            shapes=["2x32x28x28"],
            kernel_sizes=[1, 3, 7],
            heads=[4],
            variants=["StrictUnfold", "ShiftConv", "MergedConv", "Production"],
            repeats=3,
        )
    elif command == "flops":
        base.update(architectures=["SwinT_LSA", "SwinT_ELSA", "SwinT_ELSA_HA_only", "SwinT_DwConv"], resolution=224)
    elif command == "train":
        base.update(dtype="f32", seed=7)
    return base
