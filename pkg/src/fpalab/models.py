"""Tiny classifiers: residual/plain ConvNets, a patch transformer and an MLP-Mixer."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .fp import FPConfig, PermutationPlan, build_plan, fp_forward
from .tensor import Tensor

FAMILIES = ("ConvNet", "PatchTransformer", "Mixer")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description. Fields irrelevant to ``family`` are ignored.

    ConvNet blocks are conv3x3 -> ReLU, optionally residual (stride 1, equal
    widths), optionally followed by a non-overlapping average pool.
    """

    family: str
    name: str = ""
    in_channels: int = 1
    image_size: int = 32
    num_classes: int = 10
    # ConvNet
    widths: tuple[int, ...] = (8, 16, 16, 32, 32, 32)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1, 2)
    pools: tuple[int, ...] = (1, 1, 1, 1, 1, 1)
    residual: bool = True
    head: str = "gap"
    # token models
    patch_size: int = 4
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 64
    token_mlp_dim: int = 32

    def __post_init__(self):
        for name in ("widths", "strides", "pools"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.in_channels < 1 or self.image_size < 1 or self.num_classes < 2:
            raise ConfigError("in_channels, image_size must be positive and num_classes >= 2")
        if self.family == "ConvNet":
            if not (len(self.widths) == len(self.strides) == len(self.pools)):
                raise ConfigError("widths, strides and pools must have equal length")
            if len(self.widths) < 5:
                raise ConfigError("ConvNet specs need at least 5 named blocks")
            if min(self.widths) < 1 or min(self.strides) < 1 or min(self.pools) < 1:
                raise ConfigError("ConvNet widths/strides/pools must be positive")
            if self.head not in ("gap", "flatten"):
                raise ConfigError(f"unknown head {self.head!r}")
            size = self.image_size
            for s, p in zip(self.strides, self.pools):
                size = (size - 1) // s + 1
                if size % p:
                    raise ConfigError(f"pool {p} does not divide feature map of size {size}")
                size //= p
            if size < 1:
                raise ConfigError("feature map vanished")
        else:
            if self.image_size % self.patch_size:
                raise ConfigError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
            if self.dim < 1 or self.depth < 1:
                raise ConfigError("dim and depth must be positive")
            if self.family == "PatchTransformer" and self.dim % self.heads:
                raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def num_blocks(self) -> int:
        return len(self.widths) if self.family == "ConvNet" else self.depth

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def block_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) at the output of each ConvNet block."""
        shapes, size = [], self.image_size
        for wdt, s, p in zip(self.widths, self.strides, self.pools):
            size = ((size - 1) // s + 1) // p
            shapes.append((wdt, size, size))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "strides", "pools"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(**d)


def zoo_specs(image_size: int = 32, in_channels: int = 1, num_classes: int = 10) -> dict[str, ArchSpec]:
    """Default desk-scale zoo: residual surrogate, VGG-style CNN target, ViT and Mixer targets."""
    common = dict(image_size=image_size, in_channels=in_channels, num_classes=num_classes)
    return {
        "convnet_a": ArchSpec("ConvNet", "convnet_a", widths=(8, 16, 16, 32, 32, 32),
                              strides=(1, 2, 1, 2, 1, 2), pools=(1,) * 6, residual=True, head="gap", **common),
        "convnet_b": ArchSpec("ConvNet", "convnet_b", widths=(16, 16, 32, 32, 48, 48),
                              strides=(1,) * 6, pools=(1, 2, 1, 2, 1, 2), residual=False, head="gap",
                              **common),
        "vit": ArchSpec("PatchTransformer", "vit", patch_size=4, dim=48, depth=4, heads=4, mlp_dim=96,
                        **common),
        "mixer": ArchSpec("Mixer", "mixer", patch_size=4, dim=48, depth=4, token_mlp_dim=64, mlp_dim=96,
                          **common),
    }


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    """Parameter container with a forward pass; subclasses build ``self.params``."""

    spec: ArchSpec

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value)
        self.params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def requires_grad_(self, flag: bool = True) -> Model:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> Model:
        """Copy with parameters cast to ``dtype`` (used by float64 gradient checks)."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(v.data, v.requires_grad, dtype=dtype) for k, v in self.params.items()}
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ConfigError("state dict keys do not match model parameters")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def _check_input(self, x: Tensor) -> None:
        s = self.spec
        want = (s.in_channels, s.image_size, s.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"{s.name or s.family}: expected input [N, {want[0]}, {want[1]}, {want[2]}], "
                                 f"got {tuple(x.shape)}")

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        return self.forward(x)


BlockHook = Callable[[int, Tensor], Tensor]


class ConvNet(Model):
    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        c_in = spec.in_channels
        for i, c_out in enumerate(spec.widths, start=1):
            self._param(f"block{i}.conv.weight", _he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
            self._param(f"block{i}.conv.bias", np.zeros(c_out, np.float32))
            c_in = c_out
        c, h, w = spec.block_shapes()[-1]
        feat = c if spec.head == "gap" else c * h * w
        self._param("head.weight", _he_uniform(rng, (feat, spec.num_classes), feat))
        self._param("head.bias", np.zeros(spec.num_classes, np.float32))

    @property
    def block_names(self) -> list[str]:
        return [f"block{i}" for i in range(1, self.spec.num_blocks + 1)]

    def forward(self, x: Tensor, hook: BlockHook | None = None) -> Tensor:
        s = self.spec
        p = self.params
        for i, (stride, pool) in enumerate(zip(s.strides, s.pools), start=1):
            w, b = p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"]
            y = T.conv2d(x, w, b, stride=stride, padding=1)
            if s.residual and stride == 1 and y.shape == x.shape:
                y = y + x
            x = T.relu(y)
            if pool > 1:
                x = T.avg_pool2d(x, pool)
            if hook is not None:
                x = hook(i, x)
        if s.head == "gap":
            feat = T.mean(x, axis=(2, 3))
        else:
            feat = x.reshape(x.shape[0], -1)
        return feat @ p["head.weight"] + p["head.bias"]

    def __call__(self, x, hook: BlockHook | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        return self.forward(x, hook)


class _TokenModel(Model):
    def _embed_params(self, rng: np.random.Generator) -> None:
        s = self.spec
        pd = s.in_channels * s.patch_size ** 2
        self._param("embed.weight", _he_uniform(rng, (pd, s.dim), pd))
        self._param("embed.bias", np.zeros(s.dim, np.float32))

    def _ln(self, name: str) -> None:
        d = self.spec.dim
        self._param(f"{name}.gain", np.ones(d, np.float32))
        self._param(f"{name}.bias", np.zeros(d, np.float32))

    def _dense(self, name: str, rng, fan_in: int, fan_out: int) -> None:
        self._param(f"{name}.weight", _he_uniform(rng, (fan_in, fan_out), fan_in))
        self._param(f"{name}.bias", np.zeros(fan_out, np.float32))

    def _apply_ln(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _apply_dense(self, name: str, x: Tensor) -> Tensor:
        return x @ self.params[f"{name}.weight"] + self.params[f"{name}.bias"]

    def _head(self, x: Tensor) -> Tensor:
        x = self._apply_ln("final_ln", x)
        return self._apply_dense("head", T.mean(x, axis=1))


class PatchTransformer(_TokenModel):
    """Pre-norm ViT with learned positional embeddings and mean-pooled tokens."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        d = spec.dim
        self._embed_params(rng)
        self._param("pos", (rng.standard_normal((1, spec.num_tokens, d)) * 0.02).astype(np.float32))
        for i in range(1, spec.depth + 1):
            self._ln(f"block{i}.ln1")
            for proj in ("q", "k", "v", "o"):
                self._dense(f"block{i}.attn.{proj}", rng, d, d)
            self._ln(f"block{i}.ln2")
            self._dense(f"block{i}.mlp.fc1", rng, d, spec.mlp_dim)
            self._dense(f"block{i}.mlp.fc2", rng, spec.mlp_dim, d)
        self._ln("final_ln")
        self._dense("head", rng, d, spec.num_classes)

    def _attention(self, i: int, x: Tensor) -> Tensor:
        s = self.spec
        n, t, d = x.shape
        hd = d // s.heads

        def split(name):
            y = self._apply_dense(f"block{i}.attn.{name}", x)
            return y.reshape(n, t, s.heads, hd).transpose(0, 2, 1, 3)

        q, k, v = split("q"), split("k"), split("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        att = T.softmax(scores, axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self._apply_dense(f"block{i}.attn.o", out)

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        x = self._apply_dense("embed", T.patchify(x, s.patch_size)) + self.params["pos"]
        for i in range(1, s.depth + 1):
            x = x + self._attention(i, self._apply_ln(f"block{i}.ln1", x))
            h = T.gelu(self._apply_dense(f"block{i}.mlp.fc1", self._apply_ln(f"block{i}.ln2", x)))
            x = x + self._apply_dense(f"block{i}.mlp.fc2", h)
        return self._head(x)


class Mixer(_TokenModel):
    """MLP-Mixer: token-mixing MLP across patches, channel-mixing MLP across features."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__(spec)
        d, nt = spec.dim, spec.num_tokens
        self._embed_params(rng)
        for i in range(1, spec.depth + 1):
            self._ln(f"block{i}.ln1")
            self._dense(f"block{i}.token.fc1", rng, nt, spec.token_mlp_dim)
            self._dense(f"block{i}.token.fc2", rng, spec.token_mlp_dim, nt)
            self._ln(f"block{i}.ln2")
            self._dense(f"block{i}.channel.fc1", rng, d, spec.mlp_dim)
            self._dense(f"block{i}.channel.fc2", rng, spec.mlp_dim, d)
        self._ln("final_ln")
        self._dense("head", rng, d, spec.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        x = self._apply_dense("embed", T.patchify(x, s.patch_size))
        for i in range(1, s.depth + 1):
            y = self._apply_ln(f"block{i}.ln1", x).transpose(0, 2, 1)
            y = self._apply_dense(f"block{i}.token.fc2", T.gelu(self._apply_dense(f"block{i}.token.fc1", y)))
            x = x + y.transpose(0, 2, 1)
            y = self._apply_ln(f"block{i}.ln2", x)
            y = self._apply_dense(f"block{i}.channel.fc2", T.gelu(self._apply_dense(f"block{i}.channel.fc1", y)))
            x = x + y
        return self._head(x)


_BUILDERS = {"ConvNet": ConvNet, "PatchTransformer": PatchTransformer, "Mixer": Mixer}


def build_model(spec: ArchSpec, rng: np.random.Generator | int | None = None) -> Model:
    """Instantiate ``spec`` with freshly initialised parameters (requires_grad off)."""
    if not isinstance(spec, ArchSpec):
        raise ConfigError("build_model needs an ArchSpec")
    spec.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return _BUILDERS[spec.family](spec, rng)


@dataclass
class Surrogate:
    """White-box model with an attack-time FP layer after block ``fp.position``.

    A fresh plan is sampled on every forward pass unless ``frozen_plan`` is set.
    """

    model: ConvNet
    fp: FPConfig
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    active: bool = True
    frozen_plan: PermutationPlan | None = None
    last_plan: PermutationPlan | None = field(default=None, repr=False)

    @property
    def spec(self) -> ArchSpec:
        return self.model.spec

    def num_parameters(self) -> int:
        return self.model.num_parameters()

    @property
    def fp_enabled(self) -> bool:
        return self.active and self.fp.active

    def _hook(self, i: int, x: Tensor) -> Tensor:
        if i != self.fp.position:
            return x
        plan = self.frozen_plan
        if plan is None:
            plan = build_plan(x.shape, self.fp, self.rng)
        self.last_plan = plan
        return fp_forward(x, plan)

    def __call__(self, x) -> Tensor:
        if not self.fp_enabled:
            return self.model(x)
        return self.model(x, hook=self._hook)

    def sample_plan(self, batch: int) -> PermutationPlan:
        c, h, w = self.spec.block_shapes()[self.fp.position - 1]
        return build_plan((batch, c, h, w), self.fp, self.rng)


def insert_fp_layer(model: Model, cfg: FPConfig, rng: np.random.Generator | int | None = None) -> Surrogate:
    """Wrap a ConvNet so that block ``cfg.position`` feeds through the FP layer."""
    if not isinstance(model, ConvNet):
        raise ConfigError(f"FP layers are inserted into ConvNet surrogates, not {type(model).__name__}")
    if cfg.active and not 1 <= cfg.position <= model.spec.num_blocks:
        raise ConfigError(f"FP position {cfg.position} outside blocks 1..{model.spec.num_blocks}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Surrogate(model, cfg, rng)


def base_model(model) -> Model:
    return model.model if isinstance(model, Surrogate) else model


def logits_of(model, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Inference-mode logits; the FP layer is never active here."""
    net = base_model(model)
    x = np.asarray(x, dtype=np.float32)
    outs = [net(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    if not outs:
        return np.zeros((0, net.spec.num_classes), np.float32)
    return np.concatenate(outs, axis=0)


def classify(model, x: np.ndarray, batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Return (predicted labels, logits) for a batch of images."""
    logits = logits_of(model, x, batch_size)
    return logits.argmax(axis=1), logits


def accuracy(model, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
    pred, _ = classify(model, x, batch_size)
    return float((pred == np.asarray(y)).mean()) if len(y) else float("nan")
