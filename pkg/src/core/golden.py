"""
Golden tensor container.

バイナリレイアウト（すべてリトルエンディアン）:
- magic "LATT" (4 bytes)
- u8 version (=1), u8 dtype code (0=f32, 1=f64), u8 ndim, 1 byte padding
- ndim × u64 dims
- C-order elements
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from src.core.exceptions import GoldenFormatError
from src.core.tensor import as_tensor

logger = logging.getLogger(__name__)

MAGIC = b"LATT"
VERSION = 1
HEADER = struct.Struct("<4sBBBx")

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(tensor: np.ndarray) -> bytes:
    """テンソルをゴールデン形式のバイト列に変換する。"""
    array = as_tensor(tensor)
    code = _CODE_OF[array.dtype]
    if array.ndim > 255:
        raise GoldenFormatError(f"次元数が多すぎます: {array.ndim}")
    header = HEADER.pack(MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + dims + array.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")


def decode_tensor(payload: bytes) -> np.ndarray:
    """
    ゴールデン形式のバイト列をテンソルに戻す。

    Raises:
        GoldenFormatError: マジック・バージョン・dtype・長さのいずれかが不正な場合
    """
    if len(payload) < HEADER.size:
        raise GoldenFormatError("ヘッダが不足しています")
    magic, version, code, ndim = HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise GoldenFormatError(f"マジックバイトが不正です: {magic!r}")
    if version != VERSION:
        raise GoldenFormatError(f"未対応のバージョンです: {version}")
    if code not in _DTYPE_CODES:
        raise GoldenFormatError(f"未対応のdtypeコードです: {code}")
    if ndim == 0:
        raise GoldenFormatError("ndimは1以上である必要があります")

    offset = HEADER.size
    dims_size = 8 * ndim
    if len(payload) < offset + dims_size:
        raise GoldenFormatError("次元情報が不足しています")
    dims = struct.unpack_from(f"<{ndim}Q", payload, offset)
    offset += dims_size

    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.uint64))
    expected = count * dtype.itemsize
    if len(payload) - offset != expected:
        raise GoldenFormatError(f"データ長が一致しません: 期待 {expected} bytes, 実際 {len(payload) - offset} bytes")
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return as_tensor(data.reshape(dims).astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path: Union[str, Path], tensor: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))
    logger.debug(f"テンソルを保存しました: {path} {tuple(np.shape(tensor))}")
    return path


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise GoldenFormatError(f"テンソルファイルが見つかりません: {path}")
    return decode_tensor(path.read_bytes())
