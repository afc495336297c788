"""Splitting, optimizers, learning-rate schedule and the mini-batch training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels
from . import layers as L
from . import rng
from .errors import ContractError, ParameterError, ShapeError
from .imaging import CROP_TAGS, DEFAULT_CROP_FRACTION, block_mean, crop_stack
from .model import Model

OPTIMIZERS = ("sgd_momentum", "adam")
DEFAULT_LR = {"sgd_momentum": 0.01, "adam": 0.001}


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr0: float | None = None  # None picks the optimizer's default
    decay_rate: float = 0.9
    decay_period: int = 500
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    l2: float = 1e-4
    augment: bool = False
    crop_fraction: float = DEFAULT_CROP_FRACTION
    input_size: int = 64
    split_ratio: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.optimizer == "sgd":
            self.optimizer = "sgd_momentum"
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.lr0 is None:
            self.lr0 = DEFAULT_LR[self.optimizer]
        if not 0 < self.split_ratio < 1:
            raise ParameterError("split_ratio must be in (0, 1)")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 (batch normalisation)")
        if self.epochs < 0 or self.l2 < 0 or self.decay_period < 1:
            raise ParameterError("epochs, l2 must be >= 0 and decay_period >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# --- data ----------------------------------------------------------------------------


@dataclass
class ImageSet:
    """A stack of 8-bit fingerprint images with device labels."""

    images: np.ndarray  # uint8 (N, H, W)
    labels: np.ndarray  # int64 (N,)
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.tags:
            self.tags = ("full",) * len(self.labels)
        if len(self.images) != len(self.labels) or len(self.tags) != len(self.labels):
            raise ShapeError("images, labels and tags must have equal length")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> ImageSet:
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], tuple(self.tags[i] for i in idx))

    def inputs(self, dtype=np.float32) -> np.ndarray:
        return (self.images / np.float64(255.0)).astype(dtype)[..., None]


def image_set(measurements, size: int) -> ImageSet:
    """Grayscale images block-averaged to ``size`` x ``size``; labels are device ids."""
    stack = np.stack([np.asarray(m.bits, dtype=np.uint8) * np.uint8(255) for m in measurements])
    return ImageSet(block_mean(stack, size, size), [m.device_id for m in measurements])


def augment_set(s: ImageSet, fraction: float = DEFAULT_CROP_FRACTION) -> ImageSet:
    """Six crop variants per image, kept next to each other."""
    crops = crop_stack(s.images, fraction)  # (N, 6, H, W)
    n = len(s)
    return ImageSet(
        crops.reshape(n * len(CROP_TAGS), *s.images.shape[1:]),
        np.repeat(s.labels, len(CROP_TAGS)),
        tuple(tag for _ in range(n) for tag in CROP_TAGS),
    )


def split_dataset(labels, ratio: float, seed: int):
    """Stratified split; every class contributes the same number of training items.

    Returns sorted (train_idx, test_idx).
    """
    if not 0 < ratio < 1:
        raise ParameterError(f"split ratio must be in (0, 1), got {ratio}")
    labels = np.asarray(getattr(labels, "labels", labels))
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 2:
        raise ParameterError("every class needs at least two items to split")
    k = int(np.floor(ratio * counts.min() + 0.5))
    k = min(max(k, 1), counts.min() - 1)
    train = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        order = rng.permutation((seed, rng.SPLIT, int(c)), len(members))
        train.append(members[order[:k]])
    train = np.sort(np.concatenate(train))
    test = np.setdiff1d(np.arange(len(labels)), train)
    return train, test


def epoch_batches(n: int, batch_size: int, key: tuple[int, ...]) -> list[np.ndarray]:
    """Disjoint mini-batches covering a seeded shuffle of ``range(n)``.

    The trailing partial batch is kept; a lone leftover item joins the
    previous batch since batch normalisation cannot train on one sample.
    """
    order = rng.permutation(key, n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


# --- schedule and optimizers ------------------------------------------------------------


def lr_at(step: int, lr0: float, decay_rate: float = 0.9, decay_period: int = 500) -> float:
    if step < 0:
        raise ParameterError("step must be >= 0")
    return lr0 * decay_rate ** (step // decay_period)


@dataclass
class OptimizerState:
    kind: str
    t: int = 0
    slots: list = field(default_factory=list)  # per parameter: velocity, or (m, v)


def init_state(kind: str, params) -> OptimizerState:
    if kind == "sgd_momentum":
        return OptimizerState(kind, 0, [np.zeros_like(p) for p in params])
    if kind == "adam":
        return OptimizerState(kind, 0, [(np.zeros_like(p), np.zeros_like(p)) for p in params])
    raise ParameterError(f"unknown optimizer {kind!r}")


def _check(params, grads, state):
    if len(params) != len(grads) or len(params) != len(state.slots):
        raise ShapeError("parameter, gradient and state lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not (p.flags.c_contiguous and g.flags.c_contiguous):
            raise ShapeError("parameters and gradients must be contiguous")


def _decays(decay, n):
    if decay is None:
        return [0.0] * n
    if len(decay) != n:
        raise ShapeError("one decay coefficient per parameter is required")
    return [float(d) for d in decay]


def sgd_momentum_step(params, grads, state: OptimizerState, lr: float, momentum: float = 0.9, decay=None):
    """v <- momentum * v + g;  w <- w - lr * v, in place.

    ``decay[i] * w`` is added to gradient ``i`` first (2 * lambda for L2-penalised weights).
    """
    _check(params, grads, state)
    state.t += 1
    for p, g, vel, d in zip(params, grads, state.slots, _decays(decay, len(params))):
        _kernels.sgd_momentum(p.reshape(-1), g.reshape(-1), vel.reshape(-1), lr, momentum, d)
    return params, state


def adam_step(params, grads, state: OptimizerState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, decay=None):
    """Adam with bias correction, in place. ``decay`` as for ``sgd_momentum_step``."""
    _check(params, grads, state)
    state.t += 1
    t = state.t
    scale = lr / (1 - beta1**t)
    inv_sqrt_bc2 = 1 / np.sqrt(1 - beta2**t)
    for p, g, (m, v), d in zip(params, grads, state.slots, _decays(decay, len(params))):
        _kernels.adam(
            p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), scale, inv_sqrt_bc2, beta1, beta2, eps, d
        )
    return params, state


# --- training loop ----------------------------------------------------------------------


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    step_epochs: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)  # per epoch, over the training batches
    test_acc: list = field(default_factory=list)  # per epoch, inference mode
    batches_per_epoch: int = 0
    train_size: int = 0
    wall_time: float = 0.0

    def rows(self):
        for s, lr, loss, e in zip(self.steps, self.lrs, self.losses, self.step_epochs):
            test = self.test_acc[e] if e < len(self.test_acc) else ""
            yield {"step": s, "lr": repr(lr), "loss": repr(loss), "epoch": e,
                   "train_acc": repr(self.train_acc[e]), "test_acc": "" if test == "" else repr(test)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, ["step", "lr", "loss", "epoch", "train_acc", "test_acc"], lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def train(model: Model, train_set: ImageSet, test_set: ImageSet | None, config: TrainConfig, log=None):
    """Fit a copy of ``model``; the argument is left untouched.

    Returns the trained model and its history.
    """
    if len(train_set) == 0:
        raise ContractError("empty training set")
    model = model.copy()
    if config.augment:
        train_set = augment_set(train_set, config.crop_fraction)
    if config.batch_size > len(train_set):
        raise ContractError(f"batch size {config.batch_size} exceeds training set size {len(train_set)}")
    x = train_set.inputs(model.dtype)
    y = train_set.labels
    if x.shape[1:] != model.arch.input_shape:
        raise ContractError(f"images are {x.shape[1:]}, model expects {model.arch.input_shape}")
    x_test = test_set.inputs(model.dtype) if test_set is not None and len(test_set) else None

    pairs = model.trainable()
    params = [layer.params[name] for layer, name in pairs]
    decay = [2 * config.l2 if name in layer.regularized else 0.0 for layer, name in pairs]
    state = init_state(config.optimizer, params)
    history = TrainHistory(train_size=len(train_set))
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        batches = epoch_batches(len(train_set), config.batch_size, (config.seed, rng.SHUFFLE, epoch))
        history.batches_per_epoch = len(batches)
        correct = 0
        for idx in batches:
            probs = model.forward(x[idx], training=True, key=(config.seed, rng.DROPOUT, step))
            loss = L.loss(probs, y[idx], model.regularized_weights(), config.l2)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
            model.backward(L.loss_grad_logits(probs, y[idx]).astype(model.dtype))
            grads = [layer.grads[name] for layer, name in pairs]
            lr = lr_at(step, config.lr0, config.decay_rate, config.decay_period)
            if config.optimizer == "adam":
                adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps, decay)
            else:
                sgd_momentum_step(params, grads, state, lr, config.momentum, decay)
            history.steps.append(step)
            history.lrs.append(lr)
            history.losses.append(loss)
            history.step_epochs.append(epoch)
            step += 1
        history.train_acc.append(correct / len(train_set))
        if x_test is not None:
            history.test_acc.append(accuracy(model.predict_proba(x_test), test_set.labels))
        if log:
            test = f" test_acc={history.test_acc[-1]:.4f}" if x_test is not None else ""
            log(f"epoch {epoch + 1}/{config.epochs} loss={history.losses[-1]:.4f} "
                f"train_acc={history.train_acc[-1]:.4f}{test}")
    history.wall_time = time.perf_counter() - start
    return model, history
