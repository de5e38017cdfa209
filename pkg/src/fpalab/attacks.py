"""Transfer attacks under an l-infinity budget: I-FGSM, MI-FGSM, DIM, TIM, SIM, Admix.

Every method shares one iteration loop (sign step, epsilon-ball projection,
[0, 1] clip). The FP layer lives inside the surrogate, so any method composes
with FPA without code changes here.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InvariantError
from .tensor import Tensor

ULP = float(np.spacing(np.float32(1.0)))


class Method(str, enum.Enum):
    IFGSM = "IFGSM"
    MIFGSM = "MIFGSM"
    DIM = "DIM"
    TIM = "TIM"
    SIM = "SIM"
    ADMIX = "Admix"

    @classmethod
    def parse(cls, value) -> Method:
        if isinstance(value, Method):
            return value
        key = str(value).replace("-", "").upper()
        for m in cls:
            if m.value.upper() == key:
                return m
        raise ConfigError(f"unknown attack method {value!r}")


@dataclass(frozen=True)
class AttackConfig:
    method: Method = Method.IFGSM
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 50
    mu: float = 1.0
    m_copies: int = 5
    dim_prob: float = 0.5
    dim_min_ratio: float = 0.875
    tim_kernel_size: int = 7
    admix_count: int = 3
    admix_eta: float = 0.2
    admix_sim: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise ConfigError(f"need 0 < alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.m_copies < 1:
            raise ConfigError("m_copies must be >= 1")
        if self.tim_kernel_size < 1 or self.tim_kernel_size % 2 == 0:
            raise ConfigError(f"TIM kernel size must be odd, got {self.tim_kernel_size}")
        if not 0 <= self.dim_prob <= 1 or not 0 < self.dim_min_ratio <= 1:
            raise ConfigError("dim_prob must lie in [0, 1] and dim_min_ratio in (0, 1]")
        if self.admix_count < 1:
            raise ConfigError("admix_count must be >= 1")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        return cls(**d)


@dataclass
class AdvBatch:
    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    loss_trace: list[float] = field(default_factory=list)

    def linf(self) -> float:
        return float(np.abs(self.x_adv.astype(np.float64) - self.x).max()) if self.x.size else 0.0


@dataclass
class StepInfo:
    """What one iteration saw: raw gradient, update direction and the new iterate."""

    t: int
    grad: np.ndarray
    direction: np.ndarray
    x_adv: np.ndarray
    loss: float


Observer = Callable[[StepInfo], None]


# gradients ----------------------------------------------------------------------


def input_gradient(model, x: np.ndarray, y: np.ndarray, transform=None) -> tuple[np.ndarray, float]:
    """Gradient of the mean cross-entropy w.r.t. the input, and the loss value."""
    xt = Tensor(x, requires_grad=True, dtype=np.asarray(x).dtype if np.asarray(x).dtype.kind == "f" else None)
    z = xt if transform is None else transform(xt)
    loss = T.cross_entropy(model(z), y)
    T.backward(loss)
    return xt.grad, float(loss.data)


def per_sample_loss(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    from .models import logits_of

    logits = logits_of(model, x)
    return T.cross_entropy(Tensor(logits), y, reduction="none").data


def sim_gradient(model, x: np.ndarray, y: np.ndarray, m: int) -> tuple[np.ndarray, float]:
    """Average of the input gradients of the loss at x, x/2, ..., x/2^(m-1)."""
    if m < 1:
        raise ConfigError("m must be >= 1")
    total = None
    first_loss = 0.0
    for i in range(m):
        scale = 1.0 / (2 ** i)
        g, loss = input_gradient(model, x, y, transform=lambda t, s=scale: t * s)
        if i == 0:
            first_loss = loss
        total = g if total is None else total + g
    return total / np.asarray(m, total.dtype), first_loss


class AdmixSampler:
    """Draws, per sample, a random image whose label differs from that sample's."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels)
        self._by_label = {int(c): np.nonzero(self.labels != c)[0] for c in np.unique(self.labels)}

    def sample(self, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        idx = np.empty(len(y), dtype=np.int64)
        for i, c in enumerate(np.asarray(y)):
            pool = self._by_label.get(int(c))
            if pool is None:
                pool = np.arange(len(self.labels))
            if len(pool) == 0:
                raise ConfigError(f"admix sampler has no image outside class {int(c)}")
            idx[i] = pool[rng.integers(len(pool))]
        return self.images[idx]


def admix_gradient(model, x: np.ndarray, y: np.ndarray, sampler: AdmixSampler, cfg: AttackConfig,
                   rng: np.random.Generator, mixes: list[np.ndarray] | None = None) -> tuple[np.ndarray, float]:
    """Average input gradient at x + eta * x'' over ``admix_count`` foreign images.

    With ``cfg.admix_sim`` each mix is additionally scaled by 1/2^i for
    i < m_copies. ``mixes`` (if given) collects the drawn images.
    """
    if sampler is None:
        raise ConfigError("Admix needs a sampler of images from other classes")
    scales = [1.0 / 2 ** i for i in range(cfg.m_copies)] if cfg.admix_sim else [1.0]
    eta = np.float32(cfg.admix_eta)
    total = None
    first_loss = None
    for _ in range(cfg.admix_count):
        other = sampler.sample(y, rng)
        if mixes is not None:
            mixes.append(other)
        offset = other * eta
        for s in scales:
            g, loss = input_gradient(model, x, y, transform=lambda t, o=offset, s=s: (t + o) * s)
            first_loss = loss if first_loss is None else first_loss
            total = g if total is None else total + g
    count = cfg.admix_count * len(scales)
    return total / np.asarray(count, total.dtype), first_loss


def dim_transform(x: Tensor, cfg: AttackConfig, rng: np.random.Generator) -> Tensor:
    """Per sample, with probability ``dim_prob``: nearest resize to r x r, then zero-pad back at a random offset."""
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise DimensionError(f"dim_transform expects square [N,C,W,W] images, got {x.shape}")
    n, _, w, _ = x.shape
    rmin = min(w, max(1, math.ceil(cfg.dim_min_ratio * w)))
    apply = rng.random(n) < cfg.dim_prob
    sizes = rng.integers(rmin, w + 1, size=n)
    u = rng.random((n, 2))
    if not apply.any():
        return x
    index = np.tile(np.arange(w * w), (n, 1))
    for i in np.nonzero(apply)[0]:
        r = int(sizes[i])
        top, left = (np.floor(u[i] * (w - r + 1))).astype(int)
        src = np.minimum(((np.arange(r) + 0.5) * w / r).astype(int), w - 1)
        rows = np.full(w, -1)
        cols = np.full(w, -1)
        rows[top:top + r] = src
        cols[left:left + r] = src
        valid = (rows[:, None] >= 0) & (cols[None, :] >= 0)
        index[i] = np.where(valid, rows[:, None] * w + cols[None, :], -1).reshape(-1)
    return T.gather_pixels(x, index)


def tim_kernel(size: int) -> np.ndarray:
    """Normalised 2-D Gaussian with sigma = size / 3."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"TIM kernel size must be odd, got {size}")
    sigma = size / 3.0
    d = np.arange(size) - size // 2
    g = np.exp(-(d ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(np.float32)


def tim_smooth(grad: np.ndarray, kernel_size: int) -> np.ndarray:
    """Channel-wise convolution with ``tim_kernel``; borders replicate the edge so the output keeps its size."""
    kernel = tim_kernel(kernel_size)
    if kernel_size == 1:
        return grad.copy()
    n, c, h, w = grad.shape
    r = kernel_size // 2
    padded = np.pad(grad.reshape(n * c, 1, h, w), ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    out = T.conv2d(Tensor(padded, dtype=grad.dtype), Tensor(kernel[None, None], dtype=grad.dtype))
    return out.data.reshape(n, c, h, w)


# iteration ------------------------------------------------------------------------


def _l1_normalise(g: np.ndarray) -> np.ndarray:
    norm = np.abs(g).reshape(len(g), -1).sum(axis=1)
    safe = np.where(norm > 0, norm, 1).astype(g.dtype)
    out = g / safe.reshape((-1,) + (1,) * (g.ndim - 1))
    out[norm == 0] = 0
    return out


def check_budget(x: np.ndarray, x_adv: np.ndarray, epsilon: float) -> None:
    """Raise ``InvariantError`` unless |x_adv - x| <= epsilon (+1 ulp) and x_adv lies in [0, 1]."""
    if x_adv.size == 0:
        return
    dev = float(np.abs(x_adv.astype(np.float64) - x).max())
    if dev > float(np.float32(epsilon)) + ULP:
        raise InvariantError(f"perturbation {dev:.9g} exceeds epsilon {epsilon:.9g}")
    if x_adv.min() < 0 or x_adv.max() > 1:
        raise InvariantError("adversarial image left the [0, 1] range")


def _iterate(model, x, y, cfg: AttackConfig, grad_fn, momentum: bool, observer: Observer | None) -> AdvBatch:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise DimensionError(f"{len(x)} images but {len(y)} labels")
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.alpha)
    lo = x - eps
    hi = x + eps
    x_adv = x.copy()
    g_acc = np.zeros_like(x)
    trace = []
    for t in range(cfg.iterations):
        grad, loss = grad_fn(x_adv)
        trace.append(loss)
        if momentum:
            g_acc = np.float32(cfg.mu) * g_acc + _l1_normalise(grad)
            direction = g_acc
        else:
            direction = grad
        x_adv = x_adv + alpha * np.sign(direction)
        x_adv = np.clip(np.clip(x_adv, lo, hi), 0.0, 1.0)
        check_budget(x, x_adv, cfg.epsilon)
        if observer is not None:
            observer(StepInfo(t, grad, direction.copy(), x_adv.copy(), loss))
    return AdvBatch(x, x_adv, y, trace)


def ifgsm(model, x, y, cfg: AttackConfig, observer: Observer | None = None) -> AdvBatch:
    return _iterate(model, x, y, cfg, lambda xa: input_gradient(model, xa, y), False, observer)


def mifgsm(model, x, y, cfg: AttackConfig, observer: Observer | None = None) -> AdvBatch:
    return _iterate(model, x, y, cfg, lambda xa: input_gradient(model, xa, y), True, observer)


def dim(model, x, y, cfg: AttackConfig, observer: Observer | None = None) -> AdvBatch:
    rng = np.random.default_rng(cfg.seed)
    return _iterate(model, x, y, cfg,
                    lambda xa: input_gradient(model, xa, y, transform=lambda t: dim_transform(t, cfg, rng)),
                    False, observer)


def tim(model, x, y, cfg: AttackConfig, observer: Observer | None = None) -> AdvBatch:
    def grad_fn(xa):
        g, loss = input_gradient(model, xa, y)
        return tim_smooth(g, cfg.tim_kernel_size), loss

    return _iterate(model, x, y, cfg, grad_fn, False, observer)


def sim(model, x, y, cfg: AttackConfig, observer: Observer | None = None) -> AdvBatch:
    return _iterate(model, x, y, cfg, lambda xa: sim_gradient(model, xa, y, cfg.m_copies), False, observer)


def admix(model, x, y, cfg: AttackConfig, sampler: AdmixSampler | None = None,
          observer: Observer | None = None) -> AdvBatch:
    if sampler is None:
        raise ConfigError("Admix needs a sampler of images from other classes")
    rng = np.random.default_rng(cfg.seed)
    return _iterate(model, x, y, cfg, lambda xa: admix_gradient(model, xa, y, sampler, cfg, rng), False, observer)


_DISPATCH = {Method.IFGSM: ifgsm, Method.MIFGSM: mifgsm, Method.DIM: dim, Method.TIM: tim, Method.SIM: sim}


def run_attack(model, x, y, cfg: AttackConfig, sampler: AdmixSampler | None = None,
               observer: Observer | None = None, method: Method | str | None = None) -> AdvBatch:
    """Run ``cfg.method`` (or ``method``) against ``model``; FP activity is the model's business."""
    if method is not None:
        cfg = replace(cfg, method=Method.parse(method))
    if cfg.method is Method.ADMIX:
        return admix(model, x, y, cfg, sampler, observer)
    return _DISPATCH[cfg.method](model, x, y, cfg, observer)
