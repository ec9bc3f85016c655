"""
Named random streams.

すべての乱数は1つのシードから、名前ごとに独立したストリームとして派生させる。
ストリームを追加しても既存のストリームの値は変わらない。
"""

from __future__ import annotations

import hashlib
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm


def _name_key(name: str) -> Tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    """(seed, name) から決定的なGeneratorを作る。"""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(name)))


def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
    """±bound·stdで切断した正規分布（平均0）。"""
    values = truncnorm.rvs(-bound, bound, loc=0.0, scale=std, size=tuple(shape), random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(tuple(shape))


def normal(rng: np.random.Generator, shape: Sequence[int], std: float = 1.0, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(tuple(shape)) * std).astype(dtype)
