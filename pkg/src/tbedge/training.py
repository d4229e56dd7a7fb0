"""Softmax cross-entropy, gradients and the epoch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import DatasetIndex, make_batches
from .fp16 import infer_mixed
from .modelio import save
from .nn import Model, softmax
from .optim import OptimizerState, momentum_step

log = logging.getLogger(__name__)


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray  # d loss / d logits, shape (N, C)


def softmax_cross_entropy(logits, labels) -> LossValue:
    """Mean negative log-likelihood of one-hot ``labels`` under ``softmax(logits)``.

    The gradient with respect to the logits is ``(p - y) / N``.
    """
    z = np.asarray(logits)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != z.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} must both be (N, C)")
    if z.shape[0] < 1:
        raise ValueError("empty batch")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - (shifted * y).sum(axis=1)
    n = z.shape[0]
    grad = (softmax(z64) - y) / n
    dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64
    return LossValue(float(nll.mean()), grad.astype(dtype))


def value_and_grad(model: Model, x, labels, loss_scale: float = 1.0,
                   train: bool = True) -> Tuple[LossValue, Dict[str, np.ndarray]]:
    """Loss and per-parameter gradients for one batch.

    ``loss_scale`` multiplies the loss before differentiation.
    """
    x = np.asarray(x)
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise ValueError(f"batch mismatch: {x.shape[0]} inputs vs {labels.shape[0]} labels")
    logits, back = model.forward_vjp(x, train=train)
    lv = softmax_cross_entropy(logits, labels)
    g = lv.grad * loss_scale if loss_scale != 1.0 else lv.grad
    return lv, back(g)


def backward(model: Model, x, labels, loss_scale: float = 1.0,
             train: bool = True) -> Dict[str, np.ndarray]:
    """Gradient of the batch loss with respect to every parameter."""
    return value_and_grad(model, x, labels, loss_scale, train)[1]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    preset: str = "tiny"
    augment: bool = True
    lr: float = 0.001
    momentum: float = 0.9
    decay: float = 0.9
    decay_period: int = 10
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1 or self.decay_period < 1:
            raise ValueError("batch_size and decay_period must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or not 0 < self.decay <= 1:
            raise ValueError("need lr > 0, 0 <= momentum < 1 and 0 < decay <= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def predict_scores(model: Model, index: DatasetIndex, split: str, batch_size: int = 32,
                   fp16: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities ``(N, 2)`` and integer labels for a split (no augmentation)."""
    probs, labels = [], []
    for x, y in make_batches(index, split, batch_size, augment=False, seed=index.seed):
        if fp16:
            logits = infer_mixed(model, x)
        else:
            logits = model.forward(x)
        probs.append(softmax(logits))
        labels.append(y.argmax(axis=1))
    return np.concatenate(probs), np.concatenate(labels)


def train(model: Model, dataset: DatasetIndex, config: TrainConfig,
          state: Optional[OptimizerState] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> Tuple[Model, List[dict]]:
    """Train ``model`` in place; returns it with one history record per epoch.

    A supplied ``state`` (e.g. from a checkpoint) resumes at ``state.epoch``
    and runs up to ``config.epochs`` in total.

    Each record carries ``epoch``, ``lr``, ``loss`` and ``accuracy`` over the
    training batches, plus ``val_loss`` and ``val_accuracy`` when the dataset
    has a validation split.
    """
    counts = dataset.class_counts("train")
    if min(counts.values()) == 0:
        raise ValueError(f"training split must contain both classes, got {counts}")
    if state is None:
        state = OptimizerState.for_params(model.params, beta=config.momentum, base_lr=config.lr,
                                          decay=config.decay, period=config.decay_period)
    has_val = bool(dataset.indices("val"))
    history: List[dict] = []
    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        lr = state.lr
        total, correct, loss_sum = 0, 0, 0.0
        for x, y in make_batches(dataset, "train", config.batch_size, augment=config.augment,
                                 seed=config.seed, epoch=epoch):
            logits, back = model.forward_vjp(x, train=True)
            lv = softmax_cross_entropy(logits, y)
            grads = back(lv.grad)
            momentum_step(model.params, grads, state, lr)
            n = len(x)
            total += n
            loss_sum += lv.loss * n
            correct += int(np.sum(logits.argmax(axis=1) == y.argmax(axis=1)))
        record = {"epoch": epoch + 1, "lr": lr, "loss": loss_sum / total, "accuracy": correct / total}
        if has_val:
            probs, labels = predict_scores(model, dataset, "val", config.batch_size)
            p_true = np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)
            record["val_loss"] = float(-np.log(p_true).mean())
            record["val_accuracy"] = float(np.mean(probs.argmax(axis=1) == labels))
        history.append(record)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(record)
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            out_dir = Path(config.checkpoint_dir or ".")
            out_dir.mkdir(parents=True, exist_ok=True)
            save(model, out_dir / f"checkpoint_epoch{epoch + 1:03d}.tbw", optimizer=state)
    return model, history
