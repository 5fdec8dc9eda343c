"""Cross-entropy training with Adam, plus evaluation and firing-rate statistics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import make_batches
from .errors import PreconditionError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    firing_rates: dict[str, float] = field(default_factory=dict)
    silent_channels: dict[str, int] = field(default_factory=dict)


@dataclass
class EvalResult:
    accuracy: float
    firing_rates: dict[str, float]
    silent_channels: dict[str, int]
    channel_rates: dict[str, np.ndarray]


def evaluate(model, utterances, batch_size: int = 64) -> EvalResult:
    """Accuracy and per-site firing statistics in inference mode."""
    was_training = model.training
    model.eval()
    correct = 0
    sums = {k: np.zeros(n.channels) for k, n in model.neurons.items()}
    counts = {k: 0 for k in model.neurons}
    for batch in make_batches(utterances, batch_size):
        logits = model(batch.features, batch.valid_lengths).data
        correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
        for name, n in model.neurons.items():
            lv = n.last_levels[n.last_valid]
            sums[name] += lv.sum(axis=0)
            counts[name] += lv.shape[0]
    if was_training:
        model.train()
    T = model.cfg.T
    channel_rates = {k: sums[k] / (counts[k] * T) for k in sums}
    return EvalResult(
        correct / len(utterances),
        {k: float(v.mean()) for k, v in channel_rates.items()},
        {k: int(np.sum(v == 0)) for k, v in channel_rates.items()},
        channel_rates,
    )


SCHEDULES = ("constant", "cosine")


def learning_rate(base: float, epoch: int, epochs: int, schedule: str = "constant") -> float:
    """Learning rate for 1-based ``epoch``; cosine decays to zero after the last epoch."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * (epoch - 1) / epochs))
    raise PreconditionError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")


def train(model, train_set, test_set, epochs: int, seed: int = 0, lr: float = 3e-3,
          batch_size: int = 32, grad_clip: float | None = None, callback=None,
          schedule: str = "constant"):
    """Train in place; returns ``(model, history)`` with one entry per epoch."""
    if not train_set:
        raise PreconditionError("training set is empty")
    learning_rate(lr, 1, max(epochs, 1), schedule)
    params = model.parameters()
    opt = ad.AdamState(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        opt.lr = learning_rate(lr, epoch, epochs, schedule)
        model.train()
        total_loss, correct, seen = 0.0, 0, 0
        for batch in make_batches(train_set, batch_size, shuffle_seed=seed * 100_003 + epoch):
            with ad.Tape() as tape:
                logits = model(batch.features, batch.valid_lengths)
                loss = ad.cross_entropy(logits, batch.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}")
            grads = ad.backward(tape, loss, params=params)
            if grad_clip:
                norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
                if norm > grad_clip:
                    grads = [g * (grad_clip / norm) for g in grads]
            ad.adam_step(params, grads, opt)
            total_loss += value * len(batch)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
            seen += len(batch)
        result = evaluate(model, test_set) if test_set else None
        m = EpochMetrics(
            epoch,
            total_loss / seen,
            correct / seen,
            result.accuracy if result else float("nan"),
            result.firing_rates if result else {},
            result.silent_channels if result else {},
        )
        history.append(m)
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, m.loss, m.train_acc, m.test_acc)
        if callback is not None:
            callback(m)
    model.eval()
    return model, history


def write_history_csv(history, path) -> None:
    sites = sorted(history[0].firing_rates) if history else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc", "test_acc"] + [f"rate:{s}" for s in sites])
        for m in history:
            w.writerow([m.epoch, f"{m.loss:.6f}", f"{m.train_acc:.4f}", f"{m.test_acc:.4f}"]
                       + [f"{m.firing_rates[s]:.6f}" for s in sites])
