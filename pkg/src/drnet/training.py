"""Training protocol: Adam over seeded mini-batches, best-val-accuracy checkpoint.

The loop runs a fixed number of epochs at a fixed learning rate; after each
epoch the validation pixel accuracy is computed in inference mode
(threshold 0.5, strict greater-than) and the weights of the best epoch are
returned (earliest epoch on ties).  Everything is deterministic given the
seed: batch order derives from seed+epoch, DropBlock masks from
(seed, epoch, step).
"""

from __future__ import annotations

import copy
import math
import random
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import metrics
from .data import DatasetSplit, ImageSample
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .model import DRNet, ParameterStore
from .metrics import ConfusionCounts

OPTIMIZERS = ("adam",)


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs: int = 300
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_metric: str = "val_accuracy"
    threshold: float = 0.5
    loss_clamp: float = 1e-7

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_metric != "val_accuracy":
            raise ConfigError(f"unknown checkpoint metric {self.checkpoint_metric!r}")
        if not 0.0 < self.loss_clamp < 0.5:
            raise ConfigError(f"loss_clamp must lie in (0, 0.5), got {self.loss_clamp}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord]
    best_epoch: int
    metadata: dict = field(default_factory=dict)

    @property
    def val_accuracies(self) -> list[float]:
        return [r.val_accuracy for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("epoch,train_loss,val_loss,val_accuracy,wall_time\n")
            for r in self.records:
                f.write(
                    f"{r.epoch},{r.train_loss!r},{r.val_loss!r},"
                    f"{r.val_accuracy!r},{r.wall_time:.3f}\n"
                )


def bce_loss(probs: torch.Tensor, targets: torch.Tensor, clamp_eps: float = 1e-7) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy with probability clamping.

    Probabilities are clamped to [eps, 1-eps] before the logs so the loss
    stays finite for any finite weights.
    """
    if probs.shape != targets.shape:
        raise ShapeError(f"probability shape {tuple(probs.shape)} != target shape {tuple(targets.shape)}")
    p = torch.clamp(probs, clamp_eps, 1.0 - clamp_eps)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def select_best_epoch(val_accuracies: Sequence[float]) -> int:
    """1-based index of the maximum value; earliest epoch wins ties."""
    if not val_accuracies:
        raise ConfigError("no epochs recorded")
    best = max(val_accuracies)
    return next(i + 1 for i, v in enumerate(val_accuracies) if v == best)


def _stack(samples: Sequence[ImageSample]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None, :, :].astype(np.float32))
    y = torch.from_numpy(np.stack([s.gt_mask for s in samples])[:, None, :, :].astype(np.float32))
    return x, y


def _batch_seed(seed: int, epoch: int, step: int) -> int:
    return (((seed + 1) * 1_000_003 + epoch) * 1_000_003 + step) % 2**63


def validation_accuracy(
    model: DRNet, val_samples: Sequence[ImageSample], threshold: float = 0.5
) -> float:
    """Pooled pixel accuracy over padded validation images, inference mode.

    Binarization uses the strict ``probability > threshold`` rule (ties go
    to background).  Agrees with the evaluation module's Acc on the same
    pixels by construction.
    """
    if not val_samples:
        raise ConfigError("empty validation set")
    total = ConfusionCounts(0, 0, 0, 0)
    for s in val_samples:
        prob = model.predict_map(s.image)
        pred = (prob > threshold).astype(np.uint8)
        total = total + metrics.confusion_counts(pred, s.gt_mask)
    return metrics.acc(total)


def _epoch_validation(
    model: DRNet, val_samples: Sequence[ImageSample], cfg: TrainConfig
) -> tuple[float, float]:
    """(val_loss, val_accuracy) over padded validation images."""
    model.eval()
    loss_sum = 0.0
    pixel_count = 0
    total = ConfusionCounts(0, 0, 0, 0)
    with torch.no_grad():
        for s in val_samples:
            x, y = _stack([s])
            p = model(x)
            loss_sum += bce_loss(p, y, cfg.loss_clamp).item() * p.numel()
            pixel_count += p.numel()
            pred = (p[0, 0].numpy() > cfg.threshold).astype(np.uint8)
            total = total + metrics.confusion_counts(pred, s.gt_mask)
    return loss_sum / pixel_count, metrics.acc(total)


def train(
    model: DRNet, split: DatasetSplit, cfg: TrainConfig
) -> tuple[ParameterStore, TrainHistory]:
    """Run the full optimization and return (best weights, history).

    The model itself is left at the final-epoch weights; the returned store
    holds the epoch with the highest validation accuracy.
    """
    cfg.validate()
    if not split.train:
        raise ConfigError("empty training set")
    if not split.val:
        raise ConfigError("empty validation set")
    size = model.config.input_size
    for s in list(split.train) + list(split.val):
        if s.image.shape != (size, size):
            raise ShapeError(
                f"sample {s.id} is {s.image.shape}, expected ({size}, {size}); pad first"
            )

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    records: list[EpochRecord] = []
    best_acc = -math.inf
    best_epoch = 0
    best_state: Optional[dict] = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = list(range(len(split.train)))
        random.Random(cfg.seed + epoch).shuffle(order)
        model.train()
        batch_losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [split.train[i] for i in order[start : start + cfg.batch_size]]
            x, y = _stack(batch)
            probs = model(x, rng_seed=_batch_seed(cfg.seed, epoch, step))
            loss = bce_loss(probs, y, cfg.loss_clamp)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())
        val_loss, val_acc = _epoch_validation(model, split.val, cfg)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=sum(batch_losses) / len(batch_losses),
                val_loss=val_loss,
                val_accuracy=val_acc,
                wall_time=time.perf_counter() - t0,
            )
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    history = TrainHistory(
        records=records,
        best_epoch=best_epoch,
        metadata={
            "batch_size": cfg.batch_size,
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "optimizer": cfg.optimizer,
            "seed": cfg.seed,
            "checkpoint_metric": cfg.checkpoint_metric,
            "threshold": cfg.threshold,
        },
    )
    final_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    best_store = model.parameter_store()
    model.load_state_dict(final_state)
    return best_store, history
