"""Minibatch SGD over utterances, single- or multi-hypothesis targets."""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import DivergenceError
from .loss import rnnt_loss
from .model import (
    TransducerModel,
    add_grads,
    forward_lattice,
    loss_and_param_grads,
    scale_grads,
    sgd_step,
)

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: TransducerModel
    history: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    final_lr: float = 0.0


def dropout_seed(seed: int, epoch: int, index: int) -> int:
    return zlib.crc32(f"{seed}:{epoch}:{index}".encode())


def grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_grads(grads, clip_norm):
    if clip_norm is None:
        return grads
    norm = grad_norm(grads)
    if norm <= clip_norm:
        return grads
    return scale_grads(grads, clip_norm / norm)


def mean_loss(model, features: Sequence[np.ndarray], targets: Sequence) -> float:
    """Average eval-mode loss; multi-hypothesis targets contribute their sum."""
    from .model import _as_hypothesis_list

    total = 0.0
    for x, y in zip(features, targets):
        for hyp in _as_hypothesis_list(y, model.config.vocab_size):
            total += rnnt_loss(forward_lattice(model, x, hyp), hyp)
    return total / max(len(features), 1)


def train(
    model: TransducerModel,
    features: Sequence[np.ndarray],
    targets: Sequence,
    epochs: int,
    learning_rate: float,
    batch_size: int = 8,
    seed: int = 0,
    dev_features: Optional[Sequence[np.ndarray]] = None,
    dev_targets: Optional[Sequence] = None,
    halve_on_worse: bool = True,
    clip_norm: Optional[float] = 5.0,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train for ``epochs`` passes and return the best model seen.

    "Best" is by dev loss when a dev set is given, otherwise the final
    model. The learning rate halves whenever the monitored epoch loss
    (dev if available, else training) is worse than the previous epoch's.
    The minibatch gradient is the mean of per-utterance gradients, rescaled
    to global norm ``clip_norm`` when it exceeds it.
    """
    if len(features) != len(targets):
        raise ValueError(f"{len(features)} feature sequences but {len(targets)} targets")
    use_dev = dev_features is not None and len(dev_features) > 0
    lr = float(learning_rate)
    best_model = model
    best_dev = mean_loss(model, dev_features, dev_targets) if use_dev and epochs > 0 else np.inf
    best_epoch = 0
    history = []
    prev_monitor = np.inf
    n = len(features)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            grads = None
            for idx in batch:
                loss, g = loss_and_param_grads(
                    model, features[idx], targets[idx],
                    train_mode=True, dropout_seed=dropout_seed(seed, epoch, int(idx)),
                )
                epoch_loss += loss
                grads = g if grads is None else add_grads(grads, g)
            grads = clip_grads(scale_grads(grads, 1.0 / len(batch)), clip_norm)
            model = sgd_step(model, grads, lr)
        train_loss = epoch_loss / max(n, 1)
        if not np.isfinite(train_loss):
            raise DivergenceError("training loss became non-finite", {"epoch": epoch, "lr": lr})
        record = {"epoch": epoch, "train_loss": train_loss, "lr": lr}
        monitor = train_loss
        if use_dev:
            dev_loss = mean_loss(model, dev_features, dev_targets)
            record["dev_loss"] = dev_loss
            monitor = dev_loss
            if dev_loss < best_dev:
                best_dev, best_model, best_epoch = dev_loss, model, epoch
        history.append(record)
        log.debug("epoch %d %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
        if halve_on_worse and monitor > prev_monitor:
            lr /= 2.0
        prev_monitor = monitor
    if not use_dev:
        best_model, best_epoch = model, epochs
    return TrainResult(best_model, history, best_epoch, lr)
