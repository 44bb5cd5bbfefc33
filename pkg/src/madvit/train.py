"""Training loop: SGD with momentum, step-decayed learning rate.

All randomness flows from the config seed through named child streams, one
per concern (init, class balancing, epoch shuffling, augmentation, drops),
so that runs with the same config produce byte-identical checkpoints.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .data import Dataset, augment, upsample_balance
from .errors import DivergenceError
from .model import MadVit
from .regularizers import Mode
from .tensor import backward, cross_entropy, make_velocities, no_grad, sgd_momentum_step

STREAM_NAMES = ("init", "balance", "shuffle", "augment", "drops")


@dataclass
class Metrics:
    overall_accuracy: float
    mean_class_accuracy: float
    per_class_accuracy: np.ndarray
    loss: float


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    mean_class_acc: float


@dataclass
class TrainResult:
    model: MadVit
    history: list[EpochRow]
    drop_rows: list[tuple[int, str, int]]
    final: Metrics
    seconds: float = 0.0


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(STREAM_NAMES, children)}


def effective_lr(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch, after any decay steps passed."""
    lr = config.lr
    for boundary in config.lr_decay_epochs:
        if epoch >= boundary:
            lr /= config.lr_decay_factor
    return lr


def predictions(model: MadVit, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = np.empty(len(images), dtype=np.int64)
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(images[start:start + batch_size])
            out[start:start + batch_size] = np.argmax(logits.data, axis=1)
    return out


def evaluate(model: MadVit, dataset: Dataset, batch_size: int = 64) -> Metrics:
    num_classes = model.config.num_classes
    labels = dataset.labels
    predicted = np.empty(len(labels), dtype=np.int64)
    total_loss = 0.0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            logits = model.forward(dataset.images[start:start + batch_size])
            batch = labels[start:start + batch_size]
            predicted[start:start + batch_size] = np.argmax(logits.data, axis=1)
            total_loss += cross_entropy(logits, batch).item() * len(batch)
    per_class = np.full(num_classes, np.nan)
    for j in range(num_classes):
        mask = labels == j
        if mask.any():
            per_class[j] = float(np.mean(predicted[mask] == j))
        else:
            warnings.warn(f"class {j} absent from evaluation split", RuntimeWarning)
    overall = float(np.mean(predicted == labels))
    mean_class = float(np.nanmean(per_class))
    return Metrics(overall, mean_class, per_class, total_loss / max(len(labels), 1))


def _augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, rng) for img in images])


def train(config: TrainConfig, train_data: Dataset, test_data: Dataset,
          log=None) -> TrainResult:
    """Run the full loop; `log` (a callable) receives one line per epoch."""
    config.validate()
    started = time.time()
    streams = seed_streams(config.seed)
    model = MadVit(config, streams["init"])
    balanced = upsample_balance(train_data, streams["balance"])
    images, labels = balanced.images, balanced.labels

    params = model.param_tensors()
    velocities = make_velocities(params)
    history: list[EpochRow] = []
    drop_rows: list[tuple[int, str, int]] = []
    step = 0

    for epoch in range(1, config.epochs + 1):
        lr = effective_lr(config, epoch)
        order = streams["shuffle"].permutation(len(images))
        epoch_loss = 0.0
        epoch_hits = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _augment_batch(images[idx], streams["augment"])
            batch_labels = labels[idx]
            collect = {} if config.log_drops else None
            logits = model.forward(batch, Mode.TRAINING, streams["drops"], collect)
            loss = cross_entropy(logits, batch_labels)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch} step {step}; "
                    "lower the learning rate")
            backward(loss)
            sgd_momentum_step(params, velocities, lr, config.momentum)
            epoch_loss += value * len(idx)
            epoch_hits += int(np.sum(np.argmax(logits.data, axis=1) == batch_labels))
            if collect is not None:
                for site, decisions in collect["decisions"]:
                    for decision in decisions:
                        if decision.dropped_index is not None:
                            drop_rows.append((step, site, decision.dropped_index))
            step += 1
        test_metrics = evaluate(model, test_data)
        row = EpochRow(
            epoch=epoch,
            lr=lr,
            train_loss=epoch_loss / len(order),
            train_acc=epoch_hits / len(order),
            test_acc=test_metrics.overall_accuracy,
            mean_class_acc=test_metrics.mean_class_accuracy,
        )
        history.append(row)
        if log is not None:
            log(f"epoch {row.epoch:3d}  lr {row.lr:.5f}  loss {row.train_loss:.4f}  "
                f"train {row.train_acc:.3f}  test {row.test_acc:.3f}  "
                f"mean-class {row.mean_class_acc:.3f}")

    final = evaluate(model, test_data)
    return TrainResult(model, history, drop_rows, final, time.time() - started)


METRICS_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_acc", "mean_class_acc")


def write_metrics_csv(history: list[EpochRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in history:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss),
                             repr(row.train_acc), repr(row.test_acc),
                             repr(row.mean_class_acc)])


def write_drops_csv(rows: list[tuple[int, str, int]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "site", "dropped_index"))
        writer.writerows(rows)
