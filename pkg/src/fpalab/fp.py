"""Feature permutation (FP) layer.

A zero-parameter layer that rearranges spatial positions inside selected
feature-map channels. Two strategies:

* ``Strategy.RANDOM``: uniform random bijection over the H*W positions.
* ``Strategy.NEIGHBORHOOD``: disjoint swaps between 4-adjacent cells, built as
  a random maximal matching (cells visited in shuffled order, each unmatched
  cell swaps with a uniformly chosen unmatched neighbour, no wraparound).

Permutations are stored as gather maps: ``out[i] = in[perm[i]]``. The forward
and backward passes only move values, they never do arithmetic on them.
"""

from __future__ import annotations

import copy
import enum
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, record_op


class Strategy(str, enum.Enum):
    RANDOM = "R"
    NEIGHBORHOOD = "N"
    OFF = "off"

    @classmethod
    def parse(cls, value) -> Strategy:
        if isinstance(value, Strategy):
            return value
        key = str(value).strip()
        aliases = {"r": cls.RANDOM, "random": cls.RANDOM, "fpa-r": cls.RANDOM,
                   "n": cls.NEIGHBORHOOD, "neighborhood": cls.NEIGHBORHOOD, "fpa-n": cls.NEIGHBORHOOD,
                   "off": cls.OFF, "none": cls.OFF}
        try:
            return aliases[key.lower()]
        except KeyError:
            raise ConfigError(f"unknown FP strategy {value!r}") from None


@dataclass(frozen=True)
class FPConfig:
    """Where and how strongly to permute.

    ``gamma`` is the fraction of leading channels eligible for permutation and
    ``prob`` the per-channel, per-pass Bernoulli probability. ``position`` is the
    1-based block after which the layer sits. ``random_channels`` draws the
    eligible channels at random instead of taking the first ones; ``share_perm``
    uses one spatial permutation per sample for all its masked channels.
    """

    strategy: Strategy = Strategy.OFF
    gamma: float = 0.0
    prob: float = 0.0
    position: int = 1
    random_channels: bool = False
    share_perm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"prob must lie in [0, 1], got {self.prob}")
        if int(self.position) != self.position or self.position < 1:
            raise ConfigError(f"position must be a positive block index, got {self.position}")

    @property
    def active(self) -> bool:
        return self.strategy is not Strategy.OFF

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "gamma": self.gamma, "prob": self.prob,
                "position": self.position, "random_channels": self.random_channels,
                "share_perm": self.share_perm}

    @classmethod
    def from_dict(cls, d: dict) -> FPConfig:
        return cls(**d)


FPA_R = FPConfig(Strategy.RANDOM, gamma=0.3, prob=0.2, position=5)
FPA_N = FPConfig(Strategy.NEIGHBORHOOD, gamma=0.6, prob=0.5, position=2)
FP_OFF = FPConfig()


# gather maps index at most H*W cells, so 32 bits halve the plan's memory traffic
PERM_DTYPE = np.int32


@dataclass(frozen=True, eq=False)
class PermutationPlan:
    """Permutations for one forward pass over a batch.

    ``channel_mask[n, c]`` marks permuted channels; ``perms`` holds one gather
    map per marked (n, c) pair in row-major order.
    """

    shape: tuple[int, int, int, int]
    channel_mask: np.ndarray
    perms: np.ndarray
    strategy: Strategy
    seed_state: dict | None = None

    def __post_init__(self):
        n, c, h, w = self.shape
        if self.channel_mask.shape != (n, c):
            raise DimensionError(f"plan mask shape {self.channel_mask.shape} != {(n, c)}")
        if self.perms.shape != (int(self.channel_mask.sum()), h * w):
            raise DimensionError(f"plan perms shape {self.perms.shape} inconsistent with mask and map {h}x{w}")
        self.channel_mask.setflags(write=False)
        self.perms.setflags(write=False)

    @property
    def is_identity(self) -> bool:
        return self.perms.shape[0] == 0

    @classmethod
    def single(cls, perm, channels: int, height: int, width: int, mask=None,
               strategy: Strategy = Strategy.RANDOM) -> PermutationPlan:
        """Plan for a batch of one applying ``perm`` to the channels in ``mask`` (default: all)."""
        mask = np.ones((1, channels), bool) if mask is None else np.asarray(mask, bool).reshape(1, channels)
        perm = np.asarray(perm, PERM_DTYPE).reshape(1, height * width)
        perms = np.repeat(perm, int(mask.sum()), axis=0)
        return cls((1, channels, height, width), mask.copy(), perms, Strategy.parse(strategy))


def eligible_count(channels: int, gamma: float) -> int:
    # round first so that e.g. 0.29 * 100 -> 29, not 28
    return min(channels, math.floor(round(gamma * channels, 9)))


def select_channels(channels: int, cfg: FPConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask over ``channels``: eligible channels pass a Bernoulli(prob) draw."""
    return _channel_masks(1, channels, cfg, rng)[0]


def _channel_masks(n: int, channels: int, cfg: FPConfig, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((n, channels), dtype=bool)
    k = eligible_count(channels, cfg.gamma)
    if not cfg.active or k == 0 or cfg.prob == 0.0:
        return mask
    hits = rng.random((n, k)) < cfg.prob
    if cfg.random_channels:
        keys = rng.random((n, channels))
        chosen = np.argsort(keys, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, chosen, hits, axis=1)
    else:
        mask[:, :k] = hits
    return mask


# Samplers consume raw 64-bit words from the numpy Generator's bit generator, so
# it stays the only RNG. Bounded integers use the multiply-shift map
# (r32 * n) >> 32 on a 32-bit half-word (bias below n / 2**32).
_HI = np.uint64(32)
_LO = np.uint64(0xFFFFFFFF)


@numba.njit(cache=True, inline="always")
def _below(r32, n):
    return np.int64((r32 * np.uint64(n)) >> _HI)


@numba.njit(cache=True, inline="always")
def _fisher_yates(bits, out):
    # high half-words drive the shuffle
    m = out.shape[0]
    for i in range(m):
        out[i] = i
    for i in range(m - 1, 0, -1):
        j = _below(bits[i] >> _HI, i + 1)
        tmp = out[i]
        out[i] = out[j]
        out[j] = tmp


@numba.njit(cache=True)
def _shuffle_rows(bits, out):
    for r in range(out.shape[0]):
        _fisher_yates(bits[r], out[r])


@numba.njit(cache=True)
def _neighbor_matching(bits, h, w, out):
    # visit order from the high half-words, neighbour choice from the low ones
    p, m = out.shape
    # 4-neighbourhood table without wraparound; missing neighbours point at a
    # sentinel cell m that is permanently matched, so the scan is branch-free
    nbrs = np.full((m, 4), m, np.int64)
    for cell in range(m):
        row, col = divmod(cell, w)
        if row > 0:
            nbrs[cell, 0] = cell - w
        if row < h - 1:
            nbrs[cell, 1] = cell + w
        if col > 0:
            nbrs[cell, 2] = cell - 1
        if col < w - 1:
            nbrs[cell, 3] = cell + 1
    order = np.empty(m, np.int64)
    cand = np.empty(4, np.int64)
    free = np.empty(m + 1, np.int64)
    for r in range(p):
        _fisher_yates(bits[r], order)
        for i in range(m):
            out[r, i] = i
            free[i] = 1
        free[m] = 0
        for t in range(m):
            cell = order[t]
            if free[cell] == 0:
                continue
            cnt = 0
            for k in range(4):
                nb = nbrs[cell, k]
                cand[cnt] = nb
                cnt += free[nb]
            if cnt == 0:
                continue
            nb = cand[_below(bits[r, t] & _LO, cnt)]
            out[r, cell] = nb
            out[r, nb] = cell
            free[cell] = 0
            free[nb] = 0


def sample_permutations(strategy, count: int, height: int, width: int,
                        rng: np.random.Generator) -> np.ndarray:
    """``count`` independent gather maps over an ``height`` x ``width`` grid, shape [count, H*W]."""
    strategy = Strategy.parse(strategy)
    m = height * width
    if m < 1:
        raise DimensionError("permutation grid must contain at least one cell")
    out = np.empty((count, m), dtype=PERM_DTYPE)
    if count == 0:
        return out
    if strategy is Strategy.OFF:
        out[:] = np.arange(m)
    else:
        bits = rng.bit_generator.random_raw(count * m).reshape(count, m)
        if strategy is Strategy.RANDOM:
            _shuffle_rows(bits, out)
        else:
            _neighbor_matching(bits, height, width, out)
    return out


def sample_permutation(strategy, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """One gather map over an ``height`` x ``width`` grid."""
    return sample_permutations(strategy, 1, height, width, rng)[0]


def build_plan(shape, cfg: FPConfig, rng: np.random.Generator) -> PermutationPlan:
    """Sample a fresh plan for activations of ``shape`` = (N, C, H, W); one plan per sample."""
    n, c, h, w = (int(s) for s in shape)
    state = copy.deepcopy(rng.bit_generator.state)
    mask = _channel_masks(n, c, cfg, rng)
    total = int(mask.sum())
    if cfg.share_perm and total:
        owners = np.nonzero(mask)[0]
        per_sample = sample_permutations(cfg.strategy, n, h, w, rng)
        perms = per_sample[owners]
    else:
        perms = sample_permutations(cfg.strategy, total, h, w, rng)
    return PermutationPlan((n, c, h, w), mask, perms, cfg.strategy, state)


def _check(shape, plan: PermutationPlan) -> None:
    if tuple(shape) != tuple(plan.shape):
        raise DimensionError(f"plan built for {plan.shape} applied to tensor of shape {tuple(shape)}")


@numba.njit(cache=True)
def _move(src, rows, perms, out, scatter):
    # rows[k] of out gathered (or scattered) from src through perms[k]; both are [N*C, H*W]
    for k in range(rows.shape[0]):
        row = rows[k]
        perm = perms[k]
        if scatter:
            for i in range(perm.shape[0]):
                out[row, perm[i]] = src[row, i]
        else:
            for i in range(perm.shape[0]):
                out[row, i] = src[row, perm[i]]


def _apply(arr: np.ndarray, plan: PermutationPlan, scatter: bool) -> np.ndarray:
    n, c, h, w = plan.shape
    flat = np.ascontiguousarray(arr).reshape(n * c, h * w)
    out = flat.copy()
    rows = np.flatnonzero(plan.channel_mask)
    _move(flat, rows, plan.perms, out, scatter)
    return out.reshape(arr.shape)


def fp_backward(grad_out, plan: PermutationPlan) -> np.ndarray:
    """Adjoint of ``fp_forward``: scatter the gradient back through each permutation."""
    g = grad_out.data if isinstance(grad_out, Tensor) else np.asarray(grad_out)
    _check(g.shape, plan)
    if plan.is_identity:
        return g.copy()
    return _apply(g, plan, scatter=True)


def fp_forward(x: Tensor, plan: PermutationPlan) -> Tensor:
    """Permute the masked channels of ``x`` spatially. Differentiable, parameter-free."""
    _check(x.shape, plan)
    if plan.is_identity:
        return x
    return record_op(_apply(x.data, plan, scatter=False), (x,), "feature_permute",
                     lambda g: (fp_backward(g, plan),))


# feature-map dumps ----------------------------------------------------------------


def feature_grid(x, sample: int = 0, max_channels: int = 64, border: int = 1) -> np.ndarray:
    """uint8 tile grid of one sample's channels, each min-max normalised on its own."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise DimensionError(f"feature_grid expects [N,C,H,W], got {arr.shape}")
    maps = arr[sample, :max_channels].astype(np.float64)
    c, h, w = maps.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * (h + border) + border, cols * (w + border) + border), dtype=np.uint8)
    for k in range(c):
        m = maps[k]
        lo, hi = m.min(), m.max()
        tile = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
        r, q = divmod(k, cols)
        y0 = border + r * (h + border)
        x0 = border + q * (w + border)
        grid[y0:y0 + h, x0:x0 + w] = np.round(tile * 255).astype(np.uint8)
    return grid


def write_pgm(path, image: np.ndarray) -> Path:
    image = np.asarray(image, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(raw[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)


def dump_feature_maps(before, after, path, sample: int = 0, max_channels: int = 64) -> Path:
    """Write before/after channel grids side by side into one PGM (P5) file."""
    a = feature_grid(before, sample, max_channels)
    b = feature_grid(after, sample, max_channels)
    if a.shape != b.shape:
        raise DimensionError(f"before/after grids differ in shape: {a.shape} vs {b.shape}")
    gap = np.full((a.shape[0], 2), 255, dtype=np.uint8)
    return write_pgm(path, np.hstack([a, gap, b]))


def split_dump(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the side-by-side layout used by ``dump_feature_maps``."""
    w = (image.shape[1] - 2) // 2
    return image[:, :w], image[:, w + 2:]
