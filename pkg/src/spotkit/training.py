"""Shared mini-batch training loop for both architectures.

A model only needs ``parameters()``, ``with_parameters(params)``,
``clamp(params)`` and ``build(tape, leaves, batch)``.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .errors import InvalidArgumentError, TrainingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    target_sigma: float = 1.0
    seed: int = 0
    train_frac: float = 0.8
    val_frac: float = 0.2

    def __post_init__(self):
        if not self.lr >= 0:
            raise InvalidArgumentError(f"learning rate must be >= 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgumentError("epochs must be >= 0 and batch_size >= 1")
        if not (0 <= self.val_frac < 1 and 0 < self.train_frac <= 1):
            raise InvalidArgumentError("split fractions out of range")
        if abs(self.train_frac + self.val_frac - 1.0) > 1e-12:
            raise InvalidArgumentError("train_frac + val_frac must equal 1")


def split_indices(n, val_frac):
    """Leading images train, the trailing ``round(val_frac * n)`` validate."""
    n_val = int(round(val_frac * n))
    return list(range(n - n_val)), list(range(n - n_val, n))


def predict(model, images):
    tape = Tape()
    leaves = {k: tape.constant(v) for k, v in model.parameters().items()}
    return np.asarray(model.build(tape, leaves, images).value).reshape(images.shape)


def dataset_loss(model, images, targets, chunk=64):
    """Mean squared error over a whole image stack."""
    if len(images) == 0:
        return math.nan
    total = 0.0
    for lo in range(0, len(images), chunk):
        pred = predict(model, images[lo:lo + chunk])
        total += float(np.sum((pred - targets[lo:lo + chunk]) ** 2))
    return total / targets.size


def loss_and_grads(model, params, images, targets):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    pred = model.build(tape, leaves, images)
    loss = tape.mse_loss(pred, targets.reshape(pred.shape))
    tape.backward(loss)
    return float(loss.value), {k: leaves[k].grad for k in params}


class Adam:
    def __init__(self, cfg):
        self.cfg = cfg
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = c.beta1 * m + (1 - c.beta1) * g
            v = c.beta2 * v + (1 - c.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - c.beta1 ** self.t)
            vhat = v / (1 - c.beta2 ** self.t)
            params[k] = params[k] - c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)


class SGD:
    def __init__(self, cfg):
        self.cfg = cfg

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] = params[k] - self.cfg.lr * g


def train(model, dataset, cfg, progress=None):
    """Fit ``model`` to presence-map targets of ``dataset``.

    Returns ``(best_model, history)``. ``history`` holds one row per epoch
    (row 0 is the untrained model) with full-set train and validation
    losses; the returned model is the one with the lowest validation loss
    (training loss when there is no validation split), earliest on ties.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset is empty")
    images = dataset.stacked()
    targets = dataset.targets(cfg.target_sigma)
    tr_idx, va_idx = split_indices(len(dataset), cfg.val_frac)
    if not tr_idx:
        raise InvalidArgumentError("validation split leaves no training images")
    x_tr, y_tr = images[tr_idx], targets[tr_idx]
    x_va, y_va = images[va_idx], targets[va_idx]

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg) if cfg.optimizer == "adam" else SGD(cfg)
    params = model.parameters()

    def record(epoch, current):
        row = {"epoch": epoch,
               "train_loss": dataset_loss(current, x_tr, y_tr),
               "val_loss": dataset_loss(current, x_va, y_va)}
        history.append(row)
        if progress:
            progress(row)
        return row

    history = []
    row = record(0, model)
    key = "val_loss" if len(va_idx) else "train_loss"
    best, best_loss = model, row[key]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr_idx))
        for lo in range(0, len(order), cfg.batch_size):
            batch = np.sort(order[lo:lo + cfg.batch_size])
            loss, grads = loss_and_grads(model, params, x_tr[batch], y_tr[batch])
            step += 1
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            opt.step(params, grads)
            model.clamp(params)
        current = model.with_parameters(params)
        row = record(epoch, current)
        if row[key] < best_loss:
            best, best_loss = current, row[key]
        log.debug("epoch %d train %.6g val %.6g", epoch, row["train_loss"], row["val_loss"])
    best = best.with_parameters(best.parameters())
    best.meta["history_len"] = len(history)
    return best, history
