"""Joint SGD training of extractor and prototypes, plus evaluation."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nbnl
from .data import Dataset, jitter_rgb
from .fcn import FcnModel, fcn_backward, multiscale_forward, pyramid_batch
from .nbnl import NbnlConfig, PrototypeBank

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 15
    batch_size: int = 10
    learning_rate: float = 0.2
    lr_drop_epochs: tuple[int, int] | None = None  # None: 50% and 75% of epochs
    lr_drop_factor: float = 0.1
    weight_decay_prototypes: float = 1e-5
    weight_decay_network: float = 1e-5
    seed: int = 0
    fine_tune_last_n_layers: int | None = None  # None: every layer
    rgb_jitter: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.lr_drop_factor <= 1:
            raise ValueError(f"lr_drop_factor must be in (0, 1], got {self.lr_drop_factor}")
        if self.weight_decay_prototypes < 0 or self.weight_decay_network < 0:
            raise ValueError("weight decay must be >= 0")
        if self.lr_drop_epochs is not None:
            drops = tuple(int(e) for e in self.lr_drop_epochs)
            if len(drops) != 2 or drops[0] > drops[1]:
                raise ValueError(f"lr_drop_epochs must be two ascending epochs, got {self.lr_drop_epochs}")
            self.lr_drop_epochs = drops
        if self.fine_tune_last_n_layers is not None and self.fine_tune_last_n_layers < 0:
            raise ValueError("fine_tune_last_n_layers must be >= 0")

    @property
    def drops(self) -> tuple[int, int]:
        if self.lr_drop_epochs is not None:
            return self.lr_drop_epochs
        return (self.epochs // 2, (3 * self.epochs) // 4)

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during ``epoch`` (0-based)."""
        n_drops = sum(epoch >= e for e in self.drops)
        return self.learning_rate * self.lr_drop_factor**n_drops


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    lr: float


def initial_bank(
    model: FcnModel,
    train_set: Dataset,
    config: NbnlConfig,
    rng: np.random.Generator,
    images_per_class: int = 8,
) -> PrototypeBank:
    """Prototypes seeded from descriptors of a few training images per class."""
    labels = np.asarray(train_set.labels)
    pools = []
    for y in range(config.k):
        idx = np.flatnonzero(labels == y)
        if len(idx) == 0:
            raise ValueError(f"training set has no images of class {y}")
        idx = idx[:images_per_class]
        scaled = pyramid_batch([train_set.images[i] for i in idx], model)
        outs, _ = multiscale_forward(model, scaled, train=False)
        pools.append(np.concatenate([o.reshape(-1, o.shape[-1]) for o in outs]).astype(np.float64))
    return nbnl.init_prototypes(pools, config, rng, dtype=model.dtype)


def sgd_step(
    model: FcnModel, bank: PrototypeBank, grads: dict, grad_W: np.ndarray, lr: float, cfg: TrainingConfig
) -> None:
    """One in-place plain SGD update followed by the unit-ball projection."""
    if lr == 0:
        return
    params = model.parameters()
    for name, g in grads.items():
        if not model.is_trainable(name):
            continue
        p = params[name]
        p -= (lr * (g + cfg.weight_decay_network * p)).astype(p.dtype, copy=False)
    bank.W -= (lr * (grad_W + cfg.weight_decay_prototypes * bank.W)).astype(bank.W.dtype, copy=False)
    nbnl.project_unit_ball(bank.W)


def batch_loss_and_grads(
    model: FcnModel, bank: PrototypeBank, scaled: list[np.ndarray], labels, train: bool = True
) -> tuple[float, dict, np.ndarray]:
    """Surrogate loss of a batch and gradients for the network and the prototypes."""
    outs, caches = multiscale_forward(model, scaled, train=train)
    value, grad_W, grad_desc = nbnl.surrogate_batch(outs, bank, labels)
    grads = None
    if any(model.trainable):
        for g, cache, o in zip(grad_desc, caches, outs):
            n, eta, d = o.shape
            h, w = cache.grid[1:]
            part = fcn_backward(model, g.reshape(n, h, w, d), cache)
            if grads is None:
                grads = part
            else:
                for k in grads:
                    grads[k] += part[k]
    return value, grads or {}, grad_W


def train(
    model: FcnModel, bank: PrototypeBank, train_set: Dataset, cfg: TrainingConfig, on_epoch=None
) -> tuple[FcnModel, PrototypeBank, list[HistoryRow]]:
    """Minimize the per-descriptor surrogate loss by mini-batch SGD.

    Inputs are not modified; trained copies are returned with the per-epoch
    mean loss history.
    """
    if train_set.label_set.k != bank.config.k:
        raise ValueError(f"dataset has {train_set.label_set.k} classes, prototype bank has {bank.config.k}")
    model = model.copy()
    bank = bank.copy()
    model.set_trainable_last(cfg.fine_tune_last_n_layers)
    labels = np.asarray(train_set.labels)
    n = len(train_set)
    static = None if cfg.rgb_jitter else pyramid_batch(train_set.images, model)
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cfg.lr_at(epoch)
        if static is None:
            scaled_all = pyramid_batch([jitter_rgb(img, rng) for img in train_set.images], model)
        else:
            scaled_all = static
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            value, grads, grad_W = batch_loss_and_grads(
                model, bank, [s[idx] for s in scaled_all], labels[idx]
            )
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            total += value * len(idx)
            sgd_step(model, bank, grads, grad_W, lr, cfg)
        history.append(HistoryRow(epoch, total / n, lr))
        log.info("epoch %d loss %.6f lr %g", epoch, total / n, lr)
        if on_epoch is not None:
            on_epoch(history[-1])
    return model, bank, history


def write_history_csv(history: list[HistoryRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr"])
        for row in history:
            w.writerow([row.epoch, repr(float(row.loss)), repr(float(row.lr))])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows: true label, columns: predicted
    per_class_accuracy: np.ndarray
    predictions: np.ndarray
    descriptors_per_second: float = field(default=0.0, compare=False)

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return (
            self.accuracy == other.accuracy
            and np.array_equal(self.confusion, other.confusion)
            and np.array_equal(self.per_class_accuracy, other.per_class_accuracy, equal_nan=True)
            and np.array_equal(self.predictions, other.predictions)
        )


def report_from_predictions(truth, predicted, k: int) -> EvalReport:
    truth = np.asarray(truth, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    if np.any((truth < 0) | (truth >= k)) or np.any((predicted < 0) | (predicted >= k)):
        raise ValueError(f"label outside range 0..{k - 1}")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (truth, predicted), 1)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(conf) / np.maximum(rows, 1), np.nan)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return EvalReport(acc, conf, per_class, predicted)


def predict(model: FcnModel, bank: PrototypeBank, images, batch_size: int = 32) -> tuple[np.ndarray, int]:
    """Predicted labels and the number of descriptors scored."""
    preds, n_desc = [], 0
    for start in range(0, len(images), batch_size):
        scaled = pyramid_batch(images[start : start + batch_size], model)
        outs, _ = multiscale_forward(model, scaled, train=False)
        n_desc += sum(o.shape[0] * o.shape[1] for o in outs)
        h = nbnl.batch_likelihoods([o.astype(np.float64) for o in outs], bank)
        preds.append(np.argmax(h, axis=1))
    return np.concatenate(preds), n_desc


def evaluate(model: FcnModel, bank: PrototypeBank, test_set: Dataset, batch_size: int = 32) -> EvalReport:
    k = bank.config.k
    bad = [y for y in test_set.labels if not 0 <= y < k]
    if bad:
        raise ValueError(f"test label {bad[0]} outside the bank's {k} classes")
    t0 = time.perf_counter()
    preds, n_desc = predict(model, bank, test_set.images, batch_size)
    elapsed = time.perf_counter() - t0
    report = report_from_predictions(test_set.labels, preds, k)
    report.descriptors_per_second = n_desc / elapsed if elapsed > 0 else float("inf")
    return report


def write_confusion_csv(report: EvalReport, path: str | os.PathLike) -> None:
    k = report.confusion.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_true", "label_pred", "count"])
        for t in range(k):
            for p in range(k):
                w.writerow([t, p, int(report.confusion[t, p])])


def write_report(report: EvalReport, out_dir: str | os.PathLike, stem: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_confusion_csv(report, out / f"{stem}_confusion.csv")
    lines = [f"accuracy {report.accuracy!r}"]
    lines += [f"class {y} accuracy {a!r}" for y, a in enumerate(report.per_class_accuracy)]
    lines.append(f"descriptors_per_second {report.descriptors_per_second:.1f}")
    (out / f"{stem}_summary.txt").write_text("\n".join(lines) + "\n")
