"""Mini-batch Adam training with a cyclic learning rate and early stopping."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import evaluate_mse, loss_and_grad, per_pixel
from .optim import Adam, cyclic_lr

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, batch, lr, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr:g}")
        self.epoch, self.batch, self.lr = epoch, batch, lr


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 4000
    base_lr: float = 1e-4
    max_lr: float = 0.1
    cycle: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 0:
            raise ValueError("invalid batch size, epoch count or patience")


@dataclass
class History:
    epochs: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_early: bool = False

    def records(self):
        return [{"epoch": e, "lr": lr, "train_mse": tr, "val_mse": va,
                 "train_mse_pixel": per_pixel(tr), "val_mse_pixel": per_pixel(va)}
                for e, lr, tr, va in zip(self.epochs, self.lr, self.train_mse, self.val_mse)]


def train(model, train_set, val_set, cfg=TrainConfig(), callback=None):
    """Train a copy of ``model``; returns the best-validation snapshot and history.

    Epoch 0 is the untrained model, so the returned validation MSE never
    exceeds the initial one.  ``callback(epoch, history)`` runs after every
    epoch.
    """
    xtr, ytr = train_set
    xva, yva = val_set
    if len(xtr) == 0 or len(xva) == 0:
        raise ValueError("training and validation sets must be nonempty")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    hist = History()

    val = evaluate_mse(model, xva, yva)
    hist.epochs.append(0)
    hist.lr.append(0.0)
    hist.train_mse.append(evaluate_mse(model, xtr, ytr))
    hist.val_mse.append(val)
    hist.best_val, hist.best_epoch = val, 0
    best = model.copy()
    wait = 0

    for epoch in range(1, cfg.epochs + 1):
        lr = cyclic_lr(epoch - 1, cfg.base_lr, cfg.max_lr, cfg.cycle)
        order = rng.permutation(len(xtr))
        total = 0.0
        for bi, start in enumerate(range(0, len(xtr), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(model, xtr[idx], ytr[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, bi, lr, loss)
            params = model.parameters()
            opt.step(params, grads, lr)
            total += loss * len(idx)
        val = evaluate_mse(model, xva, yva)
        if not math.isfinite(val):
            raise TrainingDiverged(epoch, -1, lr, val)
        hist.epochs.append(epoch)
        hist.lr.append(lr)
        hist.train_mse.append(total / len(xtr))
        hist.val_mse.append(val)
        if val < hist.best_val:
            hist.best_val, hist.best_epoch = val, epoch
            best = model.copy()
            wait = 0
        else:
            wait += 1
        log.debug("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, hist.train_mse[-1], val)
        if callback is not None:
            callback(epoch, hist)
        if wait > cfg.patience:
            hist.stopped_early = True
            break
    return best, hist


def config_dict(cfg):
    return asdict(cfg)
