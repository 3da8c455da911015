"""Source pretraining, head replacement, freeze policies, and target-task
training under the two transfer strategies (fixed feature extractor vs.
fine-tuning).

All randomness flows from explicit integer seeds, so a whole
pretrain -> replace_head -> train_target pipeline is bit-reproducible.
None of these functions mutates its input model; trained copies are
returned.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import batch_iter
from .errors import CapacityError, ContractError
from .evaluate import ScoredSet, anomaly_scores, auc_trapezoid

STRATEGY_FIXED = "fixed_extractor"
STRATEGY_FINE_TUNE = "fine_tune"

SELECT_BEST_VAL_AUC = "best_val_auc"
SELECT_LAST_EPOCH = "last_epoch"

# pretraining default is deliberately higher than the transfer default
# (1e-3), keeping fine-tuning slower-moving than normal training
PRETRAIN_LR = 1e-2


@dataclass
class FreezePolicy:
    """Number of leading parameterized layers to make non-trainable.

    The classification head is always left trainable, so the count must
    stay below the number of parameterized layers.
    """

    frozen_layer_count: int = 0

    @staticmethod
    def fixed_extractor(model):
        """Freeze everything except the head."""
        return FreezePolicy(len(model.parameterized_layers()) - 1)


@dataclass
class TransferConfig:
    """Strategy, freeze depth, optimizer and loop settings for one run."""

    strategy: str = STRATEGY_FINE_TUNE
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    lr0: float = 1e-3
    decay: float = 1e-6
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    model_selection: str = SELECT_BEST_VAL_AUC
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.strategy not in (STRATEGY_FIXED, STRATEGY_FINE_TUNE):
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.model_selection not in (SELECT_BEST_VAL_AUC, SELECT_LAST_EPOCH):
            raise ContractError(f"unknown model_selection {self.model_selection!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    def make_sgd(self):
        return nn.SgdState(self.lr0, self.decay, self.momentum, self.nesterov)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float | None
    lr: float


@dataclass
class TrainRecord:
    """Per-epoch statistics plus the index of the selected epoch."""

    epochs: list
    selected_epoch: int

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_auc", "lr"])
            for e in self.epochs:
                w.writerow([
                    e.epoch,
                    repr(e.train_loss),
                    "" if e.val_auc is None else repr(e.val_auc),
                    repr(e.lr),
                ])


def _train_epochs(model, images, labels, config, epochs, evaluate_epoch=None):
    """Shared loop: per epoch, shuffled minibatch SGD; optional epoch hook."""
    state = config.make_sgd()
    record = []
    for epoch in range(epochs):
        total, seen = 0.0, 0
        lr_at_start = state.effective_lr()
        for xb, yb in batch_iter(images, labels, config.batch_size, True, config.seed, epoch):
            tape = T.Tape()
            logits = model.forward(T.Tensor(xb), tape)
            loss = T.softmax_cross_entropy(logits, yb, tape)
            T.backward(loss, tape)
            nn.sgd_step(model, state)
            nn.zero_grads(model)
            total += float(loss.data) * len(yb)
            seen += len(yb)
        val = evaluate_epoch(model) if evaluate_epoch is not None else None
        record.append(EpochStats(epoch, total / max(seen, 1), val, lr_at_start))
    return record


def pretrain_source(model, source_set, config):
    """Train the source network on its multi-class task.

    Returns (trained copy, TrainRecord); the record's val_auc column is
    empty (source training keeps the last epoch, no model selection).
    """
    labels = np.asarray(source_set.labels)
    if len(np.unique(labels)) < 2:
        raise ContractError("source set needs at least 2 classes")
    if int(labels.max()) + 1 > model.num_classes:
        raise ContractError(
            f"model has {model.num_classes} outputs but labels go up to {int(labels.max())}"
        )
    images = np.asarray(source_set.images, dtype=np.float32)

    trained = model.copy()
    stats = _train_epochs(trained, images, labels, config, config.epochs)
    return trained, TrainRecord(stats, selected_epoch=max(len(stats) - 1, 0))


def replace_head(model, num_classes, seed):
    """Swap the final dense layer for a fresh He-initialized one.

    Every non-head parameter of the returned model is bit-identical to
    the input model's; the input model is untouched.
    """
    out = model.copy()
    if not out.layers or out.layers[-1].kind != "dense":
        raise ContractError("model must end in a dense layer to replace its head")
    old = out.layers[-1]
    rng = np.random.default_rng(seed)
    head = nn.Dense(old.weight.shape[0], num_classes, rng=rng, dtype=old.weight.dtype)
    out.layers[-1] = head
    out.num_classes = int(num_classes)
    return out


def apply_freeze(model, policy):
    """Mark the first frozen_layer_count parameterized layers non-trainable.

    The head must stay trainable; the input model is untouched.
    """
    out = model.copy()
    plist = out.parameterized_layers()
    k = policy.frozen_layer_count
    if k < 0 or k > len(plist) - 1:
        raise ContractError(
            f"freeze depth {k} out of range: model has {len(plist)} parameterized layers "
            "and the head must stay trainable"
        )
    for i, layer in enumerate(plist):
        layer.trainable = i >= k
    return out


def _stratified_val_split(n_normal, n_anomalous, val_fraction, seed):
    """Held-out index sets per class; errors if either side would empty a class."""
    rng = np.random.default_rng([seed, 2])
    picks = []
    for n in (n_normal, n_anomalous):
        k = int(round(val_fraction * n))
        if k < 1 or n - k < 1:
            raise CapacityError(
                f"val fraction {val_fraction} leaves an empty split for a class of {n} samples"
            )
        picks.append(np.sort(rng.permutation(n)[:k]))
    return picks


def train_target(model, task, config):
    """Train the 2-class target model on an anomaly task.

    Holds out a seeded stratified val_fraction of the training data for
    per-epoch validation AUC, trains the rest with shuffled minibatches,
    and returns the model of the selected epoch plus the TrainRecord.
    """
    if model.num_classes != 2:
        raise ContractError(f"target model must have 2 outputs, got {model.num_classes}")
    x_norm = np.asarray(task.train_normal, dtype=np.float32)
    x_anom = np.asarray(task.train_anomalous, dtype=np.float32)
    if len(x_norm) == 0 or len(x_anom) == 0 or len(task.test_normal) == 0 or len(task.test_anomalous) == 0:
        raise CapacityError("task splits must be non-empty")
    if config.strategy == STRATEGY_FIXED:
        expected = len(model.parameterized_layers()) - 1
        frozen = sum(not l.trainable for l in model.parameterized_layers())
        if frozen != expected:
            raise ContractError(
                "fixed_extractor strategy requires every layer except the head frozen "
                f"({frozen} of {expected} frozen)"
            )

    val_n_idx, val_a_idx = _stratified_val_split(
        len(x_norm), len(x_anom), config.val_fraction, config.seed
    )
    mask_n = np.zeros(len(x_norm), dtype=bool)
    mask_n[val_n_idx] = True
    mask_a = np.zeros(len(x_anom), dtype=bool)
    mask_a[val_a_idx] = True

    x_train = np.concatenate([x_norm[~mask_n], x_anom[~mask_a]])
    y_train = np.concatenate([
        np.zeros(int((~mask_n).sum()), dtype=np.int64),
        np.ones(int((~mask_a).sum()), dtype=np.int64),
    ])
    x_val = np.concatenate([x_norm[mask_n], x_anom[mask_a]])
    y_val = np.concatenate([
        np.zeros(len(val_n_idx), dtype=np.int64),
        np.ones(len(val_a_idx), dtype=np.int64),
    ])

    trained = model.copy()
    best = {"auc": -1.0, "model": trained.copy()}

    def evaluate_epoch(m):
        auc = auc_trapezoid(ScoredSet(anomaly_scores(m, x_val), y_val))
        if auc > best["auc"]:
            best["auc"] = auc
            best["model"] = m.copy()
        return auc

    stats = _train_epochs(trained, x_train, y_train, config, config.epochs, evaluate_epoch)

    if config.epochs == 0:
        return trained, TrainRecord([], selected_epoch=0)
    if config.model_selection == SELECT_BEST_VAL_AUC:
        aucs = [e.val_auc for e in stats]
        selected = int(np.argmax(aucs))
        return best["model"], TrainRecord(stats, selected_epoch=selected)
    return trained, TrainRecord(stats, selected_epoch=len(stats) - 1)
