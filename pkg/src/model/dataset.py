"""
Procedurally generated 10-class image dataset.

外部データを使わずに分類の学習を試すためのデータセット。
各クラスは縞・市松・ブロブ・リングなどの空間パターンで、位相・周期・色をランダムにする。
同じ (seed, n) からはビット単位で同じ配列を生成する。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from src.core.exceptions import ModelConfigError
from src.core.tensor import resolve_dtype
from src.utils.rng import stream

logger = logging.getLogger(__name__)

CLASS_NAMES = (
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "antidiagonal_stripes",
    "fine_checker",
    "coarse_checker",
    "blob",
    "two_blobs",
    "rings",
    "cross",
)
NUM_CLASSES = len(CLASS_NAMES)

PatternFn = Callable[[np.random.Generator, np.ndarray, np.ndarray], np.ndarray]


def _stripes(direction: Tuple[int, int]) -> PatternFn:
    def pattern(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        period = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        return np.sin(2 * np.pi * (direction[0] * yy + direction[1] * xx) / period + phase) > 0

    return pattern


def _checker(low: int, high: int) -> PatternFn:
    def pattern(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        cell = int(rng.integers(low, high + 1))
        oy, ox = rng.integers(0, cell, size=2)
        return ((yy + oy) // cell + (xx + ox) // cell) % 2 == 0

    return pattern


def _blob_mask(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, size: float) -> np.ndarray:
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    radius = rng.uniform(0.15 * size, 0.3 * size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _blob(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    return _blob_mask(rng, yy, xx, yy.shape[0])


def _two_blobs(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    size = yy.shape[0]
    radius = rng.uniform(0.1 * size, 0.16 * size)
    half = size / 2
    cy1, cy2 = rng.uniform(radius, size - radius, size=2)
    cx1 = rng.uniform(radius, half - radius)
    cx2 = rng.uniform(half + radius, size - radius)
    first = (yy - cy1) ** 2 + (xx - cx1) ** 2 <= radius ** 2
    second = (yy - cy2) ** 2 + (xx - cx2) ** 2 <= radius ** 2
    return first | second


def _rings(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    size = yy.shape[0]
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    period = rng.uniform(4.0, 7.0)
    distance = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.sin(2 * np.pi * distance / period) > 0


def _cross(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    size = yy.shape[0]
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    width = int(rng.integers(2, max(3, size // 8) + 1))
    return (np.abs(yy - cy) < width) | (np.abs(xx - cx) < width)


PATTERNS: Dict[str, PatternFn] = {
    "horizontal_stripes": _stripes((1, 0)),
    "vertical_stripes": _stripes((0, 1)),
    "diagonal_stripes": _stripes((1, 1)),
    "antidiagonal_stripes": _stripes((1, -1)),
    "fine_checker": _checker(2, 3),
    "coarse_checker": _checker(6, 8),
    "blob": _blob,
    "two_blobs": _two_blobs,
    "rings": _rings,
    "cross": _cross,
}


def render(label: int, rng: np.random.Generator, image_size: int = 32, noise: float = 0.1) -> np.ndarray:
    """クラスlabelの画像を1枚描く。戻り値は (3, S, S)、値域はおおむね [-0.5, 0.5]。"""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    mask = PATTERNS[CLASS_NAMES[label]](rng, yy, xx)
    foreground = rng.uniform(0.6, 1.0, size=3)
    background = rng.uniform(0.0, 0.4, size=3)
    image = np.where(mask[None, :, :], foreground[:, None, None], background[:, None, None])
    if noise > 0:
        image = image + noise * rng.standard_normal(image.shape)
    return image - 0.5


@dataclass
class SyntheticDataset:
    """
    合成分類データセット。

    Attributes:
        seed: 乱数シード
        n: サンプル数
        noise: ガウスノイズの標準偏差
        image_size: 画像の一辺
        dtype: 画像のdtype（"f32" / "f64"）
    """

    seed: int
    n: int
    noise: float = 0.1
    image_size: int = 32
    dtype: str = "f32"
    images: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ModelConfigError(f"サンプル数は1以上である必要があります: {self.n}")
        rng = stream(self.seed, "dataset.synthetic")
        labels = rng.permutation(np.arange(self.n) % NUM_CLASSES)
        images = np.empty((self.n, 3, self.image_size, self.image_size), dtype=np.float64)
        for index, label in enumerate(labels):
            images[index] = render(int(label), rng, self.image_size, self.noise)
        self.images = images.astype(resolve_dtype(self.dtype))
        self.labels = labels.astype(np.int64)
        logger.debug(f"合成データセットを生成しました: n={self.n}, seed={self.seed}")

    def __len__(self) -> int:
        return self.n

    def batch(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.intp)
        return self.images[indices], self.labels[indices]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def iter_batches(self, batch_size: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """評価用に先頭から順にバッチを返す。"""
        for start in range(0, self.n, batch_size):
            yield self.batch(np.arange(start, min(start + batch_size, self.n)))
