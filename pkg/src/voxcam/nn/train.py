from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..volume.transforms import augment_batch
from . import layers as L
from .model import ModelConfig, ModelParams, forward, backward, init_params
from .optim import AdamState, ReduceLROnPlateau, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    initial_lr: float = 0.01
    lr_factor: float = 0.5
    lr_patience: int = 3
    lr_floor: float = 1e-5
    early_stop_patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if min(self.initial_lr, self.lr_factor, self.lr_floor) <= 0:
            raise ValueError("learning-rate settings must be positive")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be positive")
        if self.initial_lr <= self.lr_floor:
            raise ValueError("initial_lr must exceed lr_floor")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    adam: AdamState | None = None

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), f"{r.train_loss:.6f}", f"{r.train_acc:.6f}",
                        f"{r.val_loss:.6f}", f"{r.val_acc:.6f}"])
        return buf.getvalue()


def evaluate_loss(model: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int = 32):
    """Eval-mode mean cross-entropy and accuracy."""
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits, _ = forward(model, x[i:i + batch_size], train=False)
        probs, loss, _ = L.softmax_cross_entropy(logits.astype(np.float64), y[i:i + batch_size])
        total += loss * len(probs)
        correct += int((probs.argmax(axis=1) == y[i:i + batch_size]).sum())
    return total / len(x), correct / len(x)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set, val_set):
    """Fit a fresh model; returns the best-validation-loss ``(ModelParams, History)``.

    ``train_set`` and ``val_set`` are ``(volumes (N, X, Y, Z), labels (N,))``.
    Augmentation (flips plus one random rotation per sample) applies to the
    training set only.
    """
    x_tr, y_tr = (np.asarray(a) for a in train_set)
    x_va, y_va = (np.asarray(a) for a in val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(train_cfg.seed)
    model = init_params(model_cfg, seed=train_cfg.seed)
    x_tr = x_tr.astype(model.dtype)
    x_va = x_va.astype(model.dtype)
    if train_cfg.augment:
        x_tr = augment_batch(x_tr, rng)
        y_tr = np.tile(y_tr, 4)
    y_tr = y_tr.astype(np.int64)
    y_va = y_va.astype(np.int64)

    state = AdamState()
    sched = ReduceLROnPlateau(train_cfg.initial_lr, train_cfg.lr_factor,
                              train_cfg.lr_patience, train_cfg.lr_floor)
    hist = History()
    best_loss, best_model, best_state, wait = np.inf, None, None, 0
    bs = train_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        lr = sched.lr
        order = rng.permutation(len(x_tr))
        seen, loss_sum, correct = 0, 0.0, 0
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            if len(idx) < 2 and seen:
                continue  # a singleton batch has no batch-norm statistics
            logits, cache = forward(model, x_tr[idx], train=True, rng=rng)
            grads, loss, probs = backward(model, cache, y_tr[idx])
            adam_step(model.params, grads, state, lr,
                      train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            model.buffers.update(cache.new_buffers)
            seen += len(idx)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y_tr[idx]).sum())
        val_loss, val_acc = evaluate_loss(model, x_va, y_va)
        hist.records.append(EpochRecord(epoch, lr, loss_sum / seen, correct / seen, val_loss, val_acc))
        log.info("epoch %d lr %.2e train %.4f/%.3f val %.4f/%.3f",
                 epoch, lr, loss_sum / seen, correct / seen, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_model, wait = val_loss, model.copy(), 0
            best_state = AdamState({k: v.copy() for k, v in state.m.items()},
                                   {k: v.copy() for k, v in state.v.items()}, state.step)
            hist.best_epoch = epoch
        else:
            wait += 1
            if wait >= train_cfg.early_stop_patience:
                break
        sched.update(val_loss)
    hist.adam = best_state
    return best_model, hist
