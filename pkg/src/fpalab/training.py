"""Mini-batch training for zoo models (heavy-ball SGD or Adam)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingError
from .models import Model, accuracy
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    cosine: bool = True
    optimizer: str = "sgd"  # sgd | adam
    shift: int = 0  # random translation of up to this many pixels per axis, zero fill
    noise: float = 0.0  # random-sign pixel noise with per-image magnitude U(0, noise), clipped to [0, 1]
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.shift < 0 or self.noise < 0:
            raise ConfigError("epochs, lr, shift and noise must be >= 0 and batch_size >= 1")


def random_shift(x: np.ndarray, shift: int, rng: np.random.Generator) -> np.ndarray:
    """Translate each image by an integer offset in [-shift, shift] per axis."""
    if shift == 0:
        return x
    h, w = x.shape[-2:]
    padded = np.pad(x, ((0, 0), (0, 0), (shift, shift), (shift, shift)))
    offsets = rng.integers(0, 2 * shift + 1, (len(x), 2))
    return np.stack([padded[i, :, a:a + h, b:b + w] for i, (a, b) in enumerate(offsets)])


def random_sign_noise(x: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    if level == 0:
        return x
    mag = rng.uniform(0, level, (len(x),) + (1,) * (x.ndim - 1))
    signs = rng.integers(0, 2, x.shape) * 2 - 1
    return np.clip(x + mag * signs, 0, 1).astype(x.dtype)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.test_accuracy[-1] if self.test_accuracy else float("nan")


class SGD:
    """Heavy-ball SGD: v <- mu v + g (+ wd theta); theta <- theta - lr v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data = p.data - np.asarray(self.lr, p.dtype) * v


class Adam:
    """Adam with bias correction; ``weight_decay`` is decoupled (AdamW-style)."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)


def train(model: Model, train_x: np.ndarray, train_y: np.ndarray,
          test_x: np.ndarray | None = None, test_y: np.ndarray | None = None,
          cfg: TrainConfig = TrainConfig()) -> TrainHistory:
    """Train in place; returns per-epoch mean train loss and test accuracy.

    Raises ``TrainingError`` (carrying the last finite parameters) if the loss
    stops being finite.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.optimizer == "adam":
        opt = Adam(model.params, cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    history = TrainHistory()
    n = len(train_x)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    last_good = model.state_dict()
    model.requires_grad_(True)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if cfg.cosine:
                    opt.lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total))
                model.zero_grad()
                batch = random_sign_noise(random_shift(train_x[idx], cfg.shift, rng), cfg.noise, rng)
                loss = T.cross_entropy(model(Tensor(batch)), train_y[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    model.load_state_dict(last_good)
                    raise TrainingError(f"loss diverged at epoch {epoch} step {step}", last_good, epoch)
                T.backward(loss)
                opt.step()
                losses.append(value)
                step += 1
            last_good = model.state_dict()
            history.train_loss.append(float(np.mean(losses)))
            if test_x is not None:
                # evaluate without recording a tape; activations of a full test batch are large
                model.requires_grad_(False)
                history.test_accuracy.append(accuracy(model, test_x, test_y))
                model.requires_grad_(True)
            log.info("%s epoch %d loss %.4f acc %s", model.spec.name, epoch + 1, history.train_loss[-1],
                     history.test_accuracy[-1] if history.test_accuracy else "-")
    finally:
        model.requires_grad_(False)
    return history
