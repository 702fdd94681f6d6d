"""Mini-batch training with early stopping, and inference helpers."""
from __future__ import annotations

import contextlib
import logging
import math
from typing import Iterator

import numpy as np

from .. import ops
from ..errors import DivergenceError, NonFiniteError, TaskMismatchError, UsageError
from ..optim import OptimizerConfig, sgd_momentum_step
from ..tensor import Tensor, no_grad
from .config import TrainHistory, TrainSchedule
from .layers import Module, seed_dropout
from .model import Model

log = logging.getLogger(__name__)

ArrayPair = tuple[np.ndarray, np.ndarray]


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@contextlib.contextmanager
def eval_mode(model: Module) -> Iterator[Module]:
    flags = [(m, m.training) for _, m in model.named_modules()]
    model.eval()
    try:
        yield model
    finally:
        for m, flag in flags:
            m.training = flag


def _loss(model: Model, out: Tensor, target: np.ndarray) -> Tensor:
    if model.task == "segmentation":
        return ops.binary_cross_entropy(out, target)
    return ops.softmax_cross_entropy(out, target)


def forward_batches(model: Model, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode forward over ``x`` in chunks; returns the concatenated raw outputs."""
    outs = []
    with eval_mode(model), no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model(Tensor(x[i : i + batch_size])).data)
    return np.concatenate(outs)


def dice_score(prob: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    pred = prob >= threshold
    t = truth >= 0.5
    denom = pred.sum() + t.sum()
    return 1.0 if denom == 0 else float(2 * (pred & t).sum() / denom)


def evaluate(model: Model, data: ArrayPair, batch_size: int = 32) -> tuple[float, float]:
    """(mean loss, metric) on a held-out pair; metric is Dice or accuracy by task."""
    x, y = data
    out = forward_batches(model, x, batch_size)
    if model.task == "segmentation":
        loss = float(ops.binary_cross_entropy(Tensor(out), y).data)
        return loss, dice_score(out, y)
    loss = float(ops.softmax_cross_entropy(Tensor(out), y).data)
    return loss, float((out.argmax(axis=1) == np.asarray(y)).mean())


def _snapshot(model: Module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def fit(model: Model, train: ArrayPair, val: ArrayPair, schedule: TrainSchedule) -> TrainHistory:
    """Train with SGD+momentum, keep the best-validation-loss weights.

    ``train`` and ``val`` are (inputs, targets) pairs: N x C x H x W float32
    inputs with N x 1 x H x W mask targets (segmentation) or integer labels
    (classification). The model is left holding the best epoch's parameters.
    """
    x, y = train
    if len(x) == 0 or len(val[0]) == 0:
        raise UsageError("fit needs non-empty training and validation sets")
    if x.shape[1:] != (model.config.input_channels, *model.config.input_size):
        raise UsageError(f"input shape {x.shape[1:]} does not match model config")

    order_rng = np.random.default_rng(schedule.seed)
    seed_dropout(model, np.random.default_rng([schedule.seed, 1]))
    opt = OptimizerConfig(schedule.optimizer.learning_rate, schedule.optimizer.momentum)
    params = model.named_parameters()
    stopper = EarlyStopping(schedule.patience)
    history = TrainHistory()
    best_state = _snapshot(model)

    for epoch in range(1, schedule.max_epochs + 1):
        model.train()
        order = order_rng.permutation(len(x))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(x), schedule.batch_size), start=1):
            idx = order[start : start + schedule.batch_size]
            try:
                loss = _loss(model, model(Tensor(x[idx])), y[idx])
                loss.backward()
                sgd_momentum_step(params, opt)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, b, str(exc)) from exc
            total += float(loss.data) * len(idx)
            seen += len(idx)
        try:
            val_loss, val_metric = evaluate(model, val, schedule.batch_size)
        except NonFiniteError as exc:
            raise DivergenceError(epoch, 0, f"validation: {exc}") from exc
        history.train_loss.append(total / seen)
        history.val_loss.append(val_loss)
        history.val_metric.append(val_metric)
        log.info("epoch %d train %.4f val %.4f metric %.4f", epoch, total / seen, val_loss, val_metric)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = _snapshot(model)
        if stop:
            history.stopped_early = epoch < schedule.max_epochs
            break

    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    return history


def _as_batch(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    return arr.astype(np.float32)


def predict_mask(model: Model, image, threshold: float = 0.5) -> np.ndarray:
    """Boolean H x W mask (or N x H x W for a batch) where the sigmoid output >= threshold."""
    if model.task != "segmentation":
        raise TaskMismatchError("predict_mask needs a segmentation model")
    x = _as_batch(image)
    prob = forward_batches(model, x)[:, 0]
    mask = prob >= threshold
    return mask[0] if len(mask) == 1 and np.ndim(image) in (2, 3) and not isinstance(image, Tensor) else mask


def predict_proba(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if model.task != "classification":
        raise TaskMismatchError("predict_class needs a classification model")
    logits = forward_batches(model, _as_batch(x), batch_size)
    with no_grad():
        return ops.softmax(Tensor(logits)).data


def predict_class(model: Model, image) -> tuple[np.ndarray, int]:
    """Softmax probabilities and argmax label (ties resolve to the lower index)."""
    probs = predict_proba(model, image)[0]
    return probs, int(np.argmax(probs))


def capture_activations(model: Model, image, layer_id: str) -> Tensor:
    """Eval-mode forward returning the post-activation output of ``layer_id``."""
    layer = model.get_layer(layer_id)
    layer._taps = []
    try:
        with eval_mode(model), no_grad():
            model(Tensor(_as_batch(image)))
        return layer._taps[0]
    finally:
        layer._taps = None
