"""Minimal dense tensors with reverse-mode automatic differentiation.

Every operation whose inputs require gradients appends a node to a ``Tape``.
The tape is a flat list in execution order, so ``backward`` simply walks it
in reverse. A tape can be consumed exactly once; forward passes build a fresh
tape each time (one per attack iteration).

Arrays are float32 unless a dtype is passed explicitly. Gradient checks run
the same code paths in float64.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, TapeStateError

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        self._merged_into: Tape | None = None

    def resolve(self) -> Tape:
        tape = self
        while tape._merged_into is not None:
            tape = tape._merged_into
        return tape

    def merge(self, other: Tape) -> None:
        # node ids grow monotonically, so sorting restores execution order
        self.nodes = sorted(self.nodes + other.nodes, key=lambda n: n.id)
        other.nodes = []
        other._merged_into = self

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """n-dimensional float array that can take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.tape_id = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape(self) -> Tape | None:
        return None if self._tape is None else self._tape.resolve()

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or DEFAULT_DTYPE), False)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and register it on the tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Nothing is recorded when no input requires a gradient.
    """
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if not needs:
        return out
    tape = None
    for t in inputs:
        other = t.tape
        if other is None or other.consumed:
            continue
        if tape is None:
            tape = other
        elif other is not tape:
            tape.merge(other)
    if tape is None:
        tape = Tape()
    node = Node(op, inputs, out, backward, next(_node_ids))
    tape.nodes.append(node)
    out._tape = tape
    out.tape_id = node.id
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ancestor of ``loss`` that requires a gradient."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires a gradient")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss.tape
    if tape is None or tape.consumed:
        raise TapeStateError("tape already consumed; re-run the forward pass before backward")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        out = node.output
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf or inp.tape is not tape:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b), "add",
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record_op(ad * bd, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), "neg", lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu",
                     lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return record_op(out.astype(x.dtype), (x,), "gelu", bw)


# shape ------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    orig = x.shape
    return record_op(out, (x,), "reshape", lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return record_op(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return record_op(np.asarray(out, dtype=x.dtype), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axes, keepdims) * (1.0 / count)


# linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: contraction axis mismatch, a axis -1 = {a.shape[-1]} vs b axis -2 = {b.shape[-2]}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return record_op(out, (a, b), "matmul", bw)


# normalisation / probabilities -------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record_op(s, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return record_op(out, (x,), "log_softmax",
                     lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[N, K]`` against integer ``labels[N]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects logits [N, K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for batch axis 0 of size {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), labels]
    probs = np.exp(z - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    if reduction == "none":
        return record_op(per.astype(logits.dtype), (logits,), "cross_entropy",
                         lambda g: (probs * g[:, None],))
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    out = np.asarray(per.sum() * scale, dtype=logits.dtype)
    return record_op(out, (logits,), "cross_entropy", lambda g: (probs * (g * scale),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return record_op(out.astype(x.dtype), (x, gain, bias), "layer_norm", bw)


# image ops ---------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N, C, H, W]`` with filters ``w[T, C, kh, kw]``.

    Zero padding, integer stride, no dilation.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects X[N,C,H,W] and F[T,C,kh,kw], got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    t, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: channel axis 1 of X ({c}) != channel axis 1 of F ({cw})")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel axes (2, 3) = ({kh}, {kw}) exceed padded input ({hp}, {wp})")
    if b is not None and b.shape != (t,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({t},)")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(t, c * kh * kw)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, t, ho, wo)
    keep_cols = cols if w.requires_grad else None
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(n, t, ho * wo)
        gx = gw = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if keep_cols is not None:
            gw = np.tensordot(g2, keep_cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is None:
            return gx, gw
        gb = g2.sum(axis=(0, 2)) if b.requires_grad else None
        return gx, gw, gb

    return record_op(out, inputs, "conv2d", bw)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: spatial axes (2, 3) = ({h}, {w}) not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    scale = 1.0 / (k * k)

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * np.asarray(scale, g.dtype),)

    return record_op(out.astype(x.dtype), (x,), "avg_pool2d", bw)


def patchify(x: Tensor, patch_size: int) -> Tensor:
    """[N, C, H, W] -> [N, (H/p)(W/p), C*p*p] non-overlapping patches in raster order."""
    if x.ndim != 4:
        raise DimensionError(f"patchify expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"patchify: spatial axes (2, 3) = ({h}, {w}) not divisible by patch {p}")
    gh, gw = h // p, w // p
    out = x.data.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)

    def bw(g):
        return (g.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w),)

    return record_op(np.ascontiguousarray(out), (x,), "patchify", bw)


def gather_pixels(x: Tensor, index: np.ndarray) -> Tensor:
    """out[n, c, k] = x[n, c, index[n, k]] over flattened spatial axes; -1 yields 0.

    ``index`` has shape [N, H_out * W_out]; the output is [N, C, H_out, W_out]
    with H_out = W_out = sqrt(len).
    """
    n, c, h, w = x.shape
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != n:
        raise DimensionError(f"gather_pixels: index shape {index.shape} incompatible with batch {n}")
    side = math.isqrt(index.shape[1])
    if side * side != index.shape[1]:
        raise DimensionError("gather_pixels: output map must be square")
    valid = index >= 0
    safe = np.where(valid, index, 0)
    flat = x.data.reshape(n, c, h * w)
    out = np.take_along_axis(flat, np.broadcast_to(safe[:, None, :], (n, c, safe.shape[1])), axis=2)
    out = out * valid[:, None, :]

    def bw(g):
        gflat = g.reshape(n, c, -1) * valid[:, None, :]
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        rows = (np.arange(n)[:, None] * (h * w) + safe)  # [N, K]
        for ch in range(c):
            gx_ch = np.bincount(rows.ravel(), weights=gflat[:, ch, :].ravel(), minlength=n * h * w)
            gx[:, ch, :] = gx_ch.reshape(n, h * w)
        return (gx.reshape(n, c, h, w),)

    return record_op(out.reshape(n, c, side, side).astype(x.dtype), (x,), "gather_pixels", bw)


# oracles -------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``f`` must be deterministic: freeze any random plans before calling.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    dtype = base.dtype if base.dtype.kind == "f" else DEFAULT_DTYPE
    base = base.astype(dtype)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base, dtype=dtype)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base, dtype=dtype)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
