"""
Training loop for the miniature classifier.

- 最適化: SGD（モーメンタム）/ Adam
- 学習率スケジュール: 一定 / コサイン減衰（線形ウォームアップ可）
- 損失が非有限になった時点で打ち切り、そのステップを記録する
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.core import ops
from src.core.autograd import value_and_grad
from src.core.exceptions import ModelConfigError, NonFiniteError, TrainingDivergedError
from src.core.tensor import check_finite
from src.model.dataset import SyntheticDataset
from src.model.network import Model
from src.utils.rng import stream

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    warmup_steps: int = 0
    seed: int = 0
    log_every: int = 1
    raise_on_divergence: bool = False

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        if self.steps < 1:
            raise ModelConfigError(f"steps は1以上である必要があります: {self.steps}")
        if self.batch_size < 1:
            raise ModelConfigError(f"batch_size は1以上である必要があります: {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ModelConfigError(f"未知のoptimizerです: {self.optimizer}（候補: {', '.join(OPTIMIZERS)}）")
        if self.schedule not in SCHEDULES:
            raise ModelConfigError(f"未知のscheduleです: {self.schedule}（候補: {', '.join(SCHEDULES)}）")
        if len(self.betas) != 2:
            raise ModelConfigError(f"betas は2要素である必要があります: {self.betas}")

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["betas"] = list(self.betas)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "TrainConfig":
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelConfigError(f"未知の学習設定キーです: {sorted(unknown)}")
        return cls(**payload)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """ステップ step（0始まり）で使う学習率。"""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    def __init__(self, params: Mapping[str, np.ndarray], momentum: float = 0.9) -> None:
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            velocity = self.momentum * self.velocity[name] + grad
            self.velocity[name] = velocity
            params[name] = (params[name] - lr * velocity).astype(params[name].dtype)


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            params[name] = (params[name] - lr * update).astype(params[name].dtype)


def make_optimizer(cfg: TrainConfig, params: Mapping[str, np.ndarray]):
    if cfg.optimizer == "sgd":
        return SGD(params, momentum=cfg.momentum)
    return Adam(params, betas=cfg.betas, eps=cfg.adam_eps)


@dataclass
class TrainRecord:
    step: int
    loss: float
    acc: float
    lr: float


@dataclass
class TrainLog:
    """学習ログ。diverged_step は損失が非有限になったステップ（なければNone）。"""

    records: List[TrainRecord] = field(default_factory=list)
    diverged_step: Optional[int] = None
    final_accuracy: Optional[float] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_step is not None

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.records]

    def rows(self) -> List[Dict[str, Any]]:
        return [{"step": r.step, "loss": r.loss, "acc": r.acc, "lr": r.lr} for r in self.records]


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """ミニバッチの添字（昇順）。batch_size ≥ n なら全件。"""
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train(model: Model, dataset: SyntheticDataset, cfg: TrainConfig) -> TrainLog:
    """
    model.params をその場で更新しながら学習する。

    Args:
        model: build_model で作ったモデル
        dataset: 学習データ
        cfg: TrainConfig

    Returns:
        TrainLog（ステップごとの損失・バッチ精度・学習率）

    Raises:
        TrainingDivergedError: cfg.raise_on_divergence が真で損失が非有限になった場合
    """
    rng = stream(cfg.seed, "train.batches")
    optimizer = make_optimizer(cfg, model.params)
    log = TrainLog()
    logger.info(f"学習を開始します: steps={cfg.steps}, batch={cfg.batch_size}, optimizer={cfg.optimizer}, lr={cfg.lr}")

    for step in range(cfg.steps):
        images, labels = dataset.batch(batch_indices(len(dataset), cfg.batch_size, rng))
        captured: Dict[str, np.ndarray] = {}

        def objective(leaves):
            logits = model.forward(images, params=leaves)
            captured["logits"] = ops.value_of(logits)
            check_finite(captured["logits"], f"ステップ {step} のロジット")
            return ops.cross_entropy(logits, labels)

        try:
            loss, grads = value_and_grad(objective, model.params)
        except NonFiniteError as exc:
            logger.debug(f"ステップ {step}: 順伝播で非有限値を検出しました: {exc}")
            loss, grads = float("nan"), {}
        lr = learning_rate(cfg, step)
        if not math.isfinite(loss):
            log.diverged_step = step
            logger.warning(f"ステップ {step} で損失が非有限になりました（loss={loss}）。学習を打ち切ります")
            if cfg.raise_on_divergence:
                raise TrainingDivergedError(f"ステップ {step} で損失が発散しました", step=step)
            break
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.records.append(TrainRecord(step=step, loss=loss, acc=accuracy(captured["logits"], labels), lr=lr))
        optimizer.step(model.params, grads, lr)
        if step % 100 == 0:
            logger.debug(f"step {step}: loss={loss:.6f}, lr={lr:.3e}")

    if not log.diverged:
        log.final_accuracy = evaluate(model, dataset, cfg.batch_size)
        logger.info(f"学習が完了しました: 最終精度 {log.final_accuracy:.4f}")
    return log


def evaluate(model: Model, dataset: SyntheticDataset, batch_size: int = 256) -> float:
    """データセット全体の分類精度。"""
    correct = 0
    for images, labels in dataset.iter_batches(batch_size):
        correct += int(np.sum(model.predict(images) == labels))
    return correct / len(dataset)
