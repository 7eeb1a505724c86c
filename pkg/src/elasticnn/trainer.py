"""Supervised training and masked fine-tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import IO

import numpy as np

from . import tensor as T
from .data import SynthDataset
from .elastic import FreezeMask
from .errors import DivergenceError
from .graph import ModelGraph, forward

log = logging.getLogger(__name__)

cross_entropy = T.cross_entropy


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    patience: int = 5
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError(f"need lr_max >= lr_min > 0, got {self.lr_max}, {self.lr_min}")
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs, patience and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


def cosine_lr(t: float, cfg: TrainConfig) -> float:
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t / cfg.epochs))


class Optimizer:
    """Adam or momentum SGD that never touches frozen coordinates.

    Frozen entries keep their value and their moment estimates bit-for-bit.
    """

    def __init__(self, params: dict[str, T.Tensor], cfg: TrainConfig, mask: FreezeMask | None = None):
        self.params = params
        self.cfg = cfg
        self.trainable = None if mask is None else {k: ~m for k, m in mask.params.items()}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()} if cfg.optimizer == "adam" else None
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c = self.cfg
        for k, p in self.params.items():
            g = grads[k]
            live = None if self.trainable is None else self.trainable[k]
            if live is not None:
                if not live.any():
                    continue
                g = np.where(live, g, 0)
            if c.optimizer == "adam":
                m = c.beta1 * self.m[k] + (1 - c.beta1) * g
                v = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
                mhat = m / (1 - c.beta1**self.t)
                vhat = v / (1 - c.beta2**self.t)
                new = p.data - lr * mhat / (np.sqrt(vhat) + c.eps)
                self.v[k] = v if live is None else np.where(live, v, self.v[k])
            else:
                m = c.momentum * self.m[k] + g
                new = p.data - lr * m
            if live is not None:
                self.m[k] = np.where(live, m, self.m[k])
                p.data = np.where(live, new, p.data).astype(p.dtype, copy=False)
            else:
                self.m[k] = m
                p.data = new.astype(p.dtype, copy=False)


def evaluate(model: ModelGraph, dataset: SynthDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode; the model is not modified."""
    return evaluate_loss(model, dataset, batch_size)[1]


def evaluate_loss(model: ModelGraph, dataset: SynthDataset, batch_size: int = 256) -> tuple[float, float]:
    if len(dataset) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    for x, y in dataset.batches(batch_size):
        logits = forward(model, x, "eval").data
        total_loss += float(T.cross_entropy(logits, y).data) * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(dataset), correct / len(dataset)


def fit(
    model: ModelGraph,
    dataset: SynthDataset,
    cfg: TrainConfig,
    mask: FreezeMask | None = None,
    stream: IO[str] | None = None,
) -> tuple[ModelGraph, list[dict]]:
    """Train ``model`` in place on an 80/20 split of ``dataset``.

    With ``mask``, gradients of frozen coordinates are zeroed, the optimizer
    skips them and frozen batchnorm channels keep their running statistics.
    History records (epoch, split, loss, accuracy, lr) are also written as
    JSON lines to ``stream`` when given.
    """
    train, val = dataset.split(1 - cfg.val_fraction)
    train = train.astype(model.dtype)
    val = val.astype(model.dtype)
    opt = Optimizer(model.params, cfg, mask)
    bn_update = mask.bn_update(model) if mask is not None else None
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best, bad = math.inf, 0

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        loss_sum, correct, seen = 0.0, 0, 0
        for x, y in train.batches(cfg.batch_size, rng):
            with T.Tape() as tape:
                logits = forward(model, x, "train", bn_update)
                loss = T.cross_entropy(logits, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, value)
            grads = tape.backward(loss, model.params)
            opt.step(grads, lr)
            loss_sum += value * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        rows = [{"epoch": epoch, "split": "train", "loss": loss_sum / seen, "accuracy": correct / seen, "lr": lr}]
        val_loss, val_acc = evaluate_loss(model, val)
        if len(val) and not math.isfinite(val_loss):
            raise DivergenceError(epoch, val_loss)
        rows.append({"epoch": epoch, "split": "val", "loss": val_loss, "accuracy": val_acc, "lr": lr})
        for row in rows:
            history.append(row)
            if stream is not None:
                stream.write(json.dumps(row) + "\n")
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, rows[0]["loss"], val_loss, val_acc)
        if len(val):
            if val_loss < best:
                best, bad = val_loss, 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    return model, history


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
