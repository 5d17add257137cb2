"""Seeded BPTT training loop: AdamW with decoupled decay, cosine
annealing with restarts, per-epoch metrics, and best-validation
checkpointing. A fixed seed makes the whole parameter trajectory
bit-reproducible on one build."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attention import ForwardCtx
from .data import DenseSample, collate
from .model import SpikingTransformer, classify, cross_entropy_loss, save_checkpoint
from .tensor import Parameter, Tape, zero_grads


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-2
    epochs: int = 500
    batch_size: int = 256
    scheduler_t_max: int = 40
    seed: int = 312
    grad_clip: Optional[float] = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class AdamW:
    """Adam with decoupled weight decay; biases and batch-norm scales
    (any 1-D parameter) are excluded from decay."""

    def __init__(self, params: list[Parameter], weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, lr_t: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
            if self.weight_decay and p.ndim > 1:
                p.data = p.data - lr_t * self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - lr_t * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(epoch: int, base_lr: float, t_max: int) -> float:
    """Cosine annealing with restarts every ``t_max`` epochs, floor 0."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    phase = (epoch % t_max) / t_max
    return base_lr * (1.0 + math.cos(math.pi * phase)) / 2.0


def clip_grads(params: list[Parameter], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def evaluate(model: SpikingTransformer, samples: list[DenseSample],
             batch_size: int) -> tuple[float, float]:
    """Eval-mode loss and accuracy over a sample list."""
    model.eval()
    total_loss, correct = 0.0, 0
    for batch_idx in _batches(np.arange(len(samples)), batch_size):
        x, mask, labels = collate([samples[i] for i in batch_idx])
        scores = model.forward(x, mask)
        _, yhat, pred = classify(scores, mask)
        loss = cross_entropy_loss(yhat, labels)
        total_loss += loss.item() * len(batch_idx)
        correct += int((pred == labels).sum())
    n = len(samples)
    return total_loss / n, correct / n


def train(
    model: SpikingTransformer,
    train_samples_fn: Callable[[np.random.Generator], list[DenseSample]],
    val_samples: list[DenseSample],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
) -> list[dict]:
    """Run the full loop and return one metrics record per epoch.

    ``train_samples_fn`` materializes the epoch's training samples (this
    is where per-sample augmentation happens, fed by the seeded rng).
    The best-validation checkpoint is written to ``out_dir/best.spkc``
    as soon as it improves, so it survives a later divergence abort.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    metrics: list[dict] = []
    best_val = -1.0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        start = time.monotonic()
        lr_t = cosine_lr(epoch, cfg.lr, cfg.scheduler_t_max)
        samples = train_samples_fn(rng)
        order = rng.permutation(len(samples))
        model.train()
        epoch_loss, correct = 0.0, 0
        for batch_idx in _batches(order, cfg.batch_size):
            x, mask, labels = collate([samples[i] for i in batch_idx])
            zero_grads(params)
            with Tape() as tape:
                scores = model.forward(x, mask, ForwardCtx(training=True, rng=rng))
                _, yhat, pred = classify(scores, mask)
                loss = cross_entropy_loss(yhat, labels)
            if not math.isfinite(loss.item()):
                raise TrainingError(
                    f"loss diverged at epoch {epoch}; best checkpoint retained"
                )
            tape.backward(loss)
            if cfg.grad_clip is not None:
                clip_grads(params, cfg.grad_clip)
            opt.step(lr_t)
            epoch_loss += loss.item() * len(batch_idx)
            correct += int((pred == labels).sum())

        train_loss = epoch_loss / len(samples)
        train_acc = correct / len(samples)
        val_loss, val_acc = evaluate(model, val_samples, cfg.batch_size)
        record = {
            "epoch": epoch,
            "lr": lr_t,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "wall_ms": (time.monotonic() - start) * 1e3,
        }
        metrics.append(record)
        if val_acc > best_val:
            best_val = val_acc
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best.spkc")
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.spkc")
    return metrics


def split_validation(samples: list[DenseSample], fraction: float,
                     seed: int) -> tuple[list[DenseSample], list[DenseSample]]:
    """Held-out split for datasets that ship without one: the last
    ``fraction`` of a seeded shuffle becomes validation."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = max(1, int(round(len(samples) * fraction)))
    val_idx = set(order[len(samples) - n_val :].tolist())
    train = [samples[i] for i in order if i not in val_idx]
    val = [samples[i] for i in order if i in val_idx]
    return train, val
