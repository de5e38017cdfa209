"""Experiment orchestration: eval subsets, transfer matrices, ablations, timing, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import statistics
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from .attacks import AdmixSampler, AdvBatch, AttackConfig, Method, run_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Split, load_dataset
from .errors import ConfigError
from .fp import FPA_N, FPA_R, FPConfig, Strategy
from .models import Model, build_model, classify, insert_fp_layer, zoo_specs
from .training import TrainConfig, train

log = logging.getLogger(__name__)

REPORT_FIELDS = ("variant", "target", "mean_asr", "std_asr", "n_eval", "seconds")


# seeds ---------------------------------------------------------------------------


def derive_seed(master: int, *keys) -> int:
    """Deterministic 63-bit sub-seed for ``keys`` under ``master``.

    String keys are mapped through CRC-32, integers are used as is; the result
    is the first word of ``SeedSequence(master, spawn_key=keys)``.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    state = np.random.SeedSequence(int(master), spawn_key=spawn).generate_state(1, np.uint64)[0]
    return int(state) >> 1


# configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """An attack method optionally combined with an FP strategy, e.g. ``MIFGSM+FPA-N``."""

    method: Method
    strategy: Strategy = Strategy.OFF

    @property
    def name(self) -> str:
        if self.strategy is Strategy.OFF:
            return self.method.value
        return f"{self.method.value}+FPA-{self.strategy.value}"

    @classmethod
    def parse(cls, text: str) -> Variant:
        head, _, tail = text.partition("+")
        strategy = Strategy.parse(tail) if tail else Strategy.OFF
        return cls(Method.parse(head), strategy)

    @property
    def stochastic(self) -> bool:
        """False when every repetition yields the same adversarial batch."""
        return self.strategy is not Strategy.OFF or self.method in (Method.DIM, Method.ADMIX)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "data/mnist"
    dataset_format: str = "IDX"
    surrogate: str = "checkpoints/convnet_a.ckpt"
    targets: tuple[str, ...] = ("checkpoints/convnet_b.ckpt", "checkpoints/vit.ckpt", "checkpoints/mixer.ckpt")
    attack: AttackConfig = AttackConfig()
    fpa_r: FPConfig = FPA_R
    fpa_n: FPConfig = FPA_N
    variants: tuple[str, ...] = ("IFGSM", "IFGSM+FPA-R", "IFGSM+FPA-N")
    eval_size: int = 500
    repetitions: int = 5
    batch_size: int = 250
    record_timings: bool = False
    out_dir: str = "runs/transfer"
    checkpoint_dir: str = "checkpoints"
    training: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.eval_size < 1 or self.repetitions < 1 or self.batch_size < 1:
            raise ConfigError("eval_size, repetitions and batch_size must be positive")
        for v in self.variants:
            Variant.parse(v)

    def fp_for(self, strategy: Strategy) -> FPConfig:
        if strategy is Strategy.RANDOM:
            return self.fpa_r
        if strategy is Strategy.NEIGHBORHOOD:
            return self.fpa_n
        return FPConfig()

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "dataset_format": self.dataset_format, "surrogate": self.surrogate,
            "targets": list(self.targets), "attack": self.attack.to_dict(), "fpa_r": self.fpa_r.to_dict(),
            "fpa_n": self.fpa_n.to_dict(), "variants": list(self.variants), "eval_size": self.eval_size,
            "repetitions": self.repetitions, "batch_size": self.batch_size,
            "record_timings": self.record_timings, "out_dir": self.out_dir,
            "checkpoint_dir": self.checkpoint_dir, "training": self.training, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        jsonschema.validate(d, CONFIG_SCHEMA)
        d = dict(d)
        if "attack" in d:
            d["attack"] = AttackConfig.from_dict(d["attack"])
        for key in ("fpa_r", "fpa_n"):
            if key in d:
                d[key] = FPConfig.from_dict(d[key])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_FP_SCHEMA = {
    "type": "object",
    "properties": {
        "strategy": {"type": "string"}, "gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "prob": {"type": "number", "minimum": 0, "maximum": 1}, "position": {"type": "integer", "minimum": 1},
        "random_channels": {"type": "boolean"}, "share_perm": {"type": "boolean"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fpalab experiment config",
    "type": "object",
    "properties": {
        "dataset": {"type": "string"},
        "dataset_format": {"enum": ["IDX", "CIFAR10"]},
        "surrogate": {"type": "string"},
        "targets": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "attack": {
            "type": "object",
            "properties": {
                "method": {"type": "string"}, "epsilon": {"type": "number"}, "alpha": {"type": "number"},
                "iterations": {"type": "integer", "minimum": 0}, "mu": {"type": "number"},
                "m_copies": {"type": "integer", "minimum": 1}, "dim_prob": {"type": "number"},
                "dim_min_ratio": {"type": "number"}, "tim_kernel_size": {"type": "integer"},
                "admix_count": {"type": "integer", "minimum": 1}, "admix_eta": {"type": "number"},
                "admix_sim": {"type": "boolean"}, "seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "fpa_r": _FP_SCHEMA,
        "fpa_n": _FP_SCHEMA,
        "variants": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "eval_size": {"type": "integer", "minimum": 1},
        "repetitions": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "record_timings": {"type": "boolean"},
        "out_dir": {"type": "string"},
        "checkpoint_dir": {"type": "string"},
        "training": {"type": "object"},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
        return ExperimentConfig.from_dict(data)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid config {path}: {getattr(exc, 'message', exc)}") from None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides (value parsed as JSON when possible) to a config dict."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return data


# training the zoo ----------------------------------------------------------------

DEFAULT_TRAINING = {
    "convnet_a": {"epochs": 12, "batch_size": 32, "lr": 0.05, "noise": 0.3},
    "convnet_b": {"epochs": 8, "batch_size": 32, "lr": 0.01, "noise": 0.3},
    "vit": {"epochs": 20, "batch_size": 32, "lr": 0.002, "optimizer": "adam", "shift": 1, "noise": 0.3},
    "mixer": {"epochs": 12, "batch_size": 32, "lr": 0.02, "noise": 0.3},
}


def train_zoo(dataset: Dataset, out_dir, seed: int = 0, overrides: dict | None = None,
              names=None) -> dict[str, tuple[Model, list[float]]]:
    """Train every zoo model with derived seeds and write ``<name>.ckpt`` into ``out_dir``."""
    c, h, _ = dataset.image_shape
    specs = zoo_specs(image_size=h, in_channels=c, num_classes=dataset.num_classes)
    out = {}
    for name in names or specs:
        hyper = {**DEFAULT_TRAINING.get(name, {}), **(overrides or {}).get(name, {})}
        model = build_model(specs[name], derive_seed(seed, "init", name))
        cfg = TrainConfig(seed=derive_seed(seed, "train", name), **hyper)
        history = train(model, dataset.train.images, dataset.train.labels,
                        dataset.test.images, dataset.test.labels, cfg)
        meta = {"seed": seed, "epochs": cfg.epochs, "test_accuracy": history.final_accuracy,
                "train_loss": history.train_loss}
        save_checkpoint(model, Path(out_dir) / f"{name}.ckpt", meta)
        out[name] = (model, history.test_accuracy)
    return out


# evaluation ------------------------------------------------------------------------


def build_eval_subset(models, split: Split, n: int) -> np.ndarray:
    """Indices of the first ``n`` test images that every model classifies correctly."""
    ok = np.ones(len(split), dtype=bool)
    for m in models:
        pred, _ = classify(m, split.images)
        ok &= pred == split.labels
    idx = np.nonzero(ok)[0]
    if len(idx) < n:
        raise ConfigError(f"only {len(idx)} images are correctly classified by all models; asked for {n}")
    return idx[:n]


def transfer_counts(adv: AdvBatch, target) -> tuple[int, int]:
    pred, _ = classify(target, adv.x_adv)
    return int((pred != adv.y).sum()), len(adv.y)


def evaluate_transfer(adv: AdvBatch, target) -> float:
    """Fraction of adversarial images the target misclassifies."""
    fooled, total = transfer_counts(adv, target)
    return fooled / total if total else float("nan")


@dataclass
class Workbench:
    """Everything loaded once per experiment: data, models and the evaluation subset."""

    dataset: Dataset
    surrogate: Model
    targets: dict[str, Model]
    subset: np.ndarray
    sampler: AdmixSampler

    @property
    def x(self) -> np.ndarray:
        return self.dataset.test.images[self.subset]

    @property
    def y(self) -> np.ndarray:
        return self.dataset.test.labels[self.subset]

    @classmethod
    def from_models(cls, dataset: Dataset, surrogate: Model, targets: dict[str, Model], eval_size: int):
        subset = build_eval_subset([surrogate, *targets.values()], dataset.test, eval_size)
        return cls(dataset, surrogate, targets, subset, AdmixSampler(dataset.train.images, dataset.train.labels))


def prepare(cfg: ExperimentConfig) -> Workbench:
    dataset = load_dataset(cfg.dataset, cfg.dataset_format)
    surrogate = load_checkpoint(cfg.surrogate)
    targets = {Path(p).stem: load_checkpoint(p) for p in cfg.targets}
    return Workbench.from_models(dataset, surrogate, targets, cfg.eval_size)


def worker_count() -> int:
    raw = os.environ.get("FPALAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"FPALAB_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def attack_subset(bench: Workbench, variant: Variant, cfg: ExperimentConfig, rep: int,
                  observer=None) -> AdvBatch:
    """Attack the evaluation subset with one variant and repetition index ``rep``."""
    fp = cfg.fp_for(variant.strategy)
    attack_seed = derive_seed(cfg.seed, "attack", variant.method.value, rep)
    plan_seed = derive_seed(cfg.seed, "plan", variant.name, rep)
    surrogate = insert_fp_layer(bench.surrogate, fp, np.random.default_rng(plan_seed))
    x, y = bench.x, bench.y
    parts = []
    for b, start in enumerate(range(0, len(y), cfg.batch_size)):
        acfg = replace(cfg.attack, method=variant.method, seed=derive_seed(attack_seed, b))
        sl = slice(start, start + cfg.batch_size)
        parts.append(run_attack(surrogate, x[sl], y[sl], acfg, sampler=bench.sampler, observer=observer))
    trace = np.mean([p.loss_trace for p in parts], axis=0).tolist() if parts and parts[0].loss_trace else []
    return AdvBatch(x, np.concatenate([p.x_adv for p in parts]), y, trace)


# reports ---------------------------------------------------------------------------------


@dataclass
class TransferReport:
    variants: list[str]
    targets: list[str]
    mean_asr: np.ndarray  # [V, T]
    std_asr: np.ndarray  # [V, T]
    n_eval: int
    seconds: dict[str, float] | None = None
    asr: np.ndarray | None = None  # [V, T, R] per repetition
    successes: np.ndarray | None = None  # [V, T, R]
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    record_timings: bool = False
    failed: str | None = None

    def cell(self, variant: str, target: str) -> tuple[float, float]:
        i, j = self.variants.index(variant), self.targets.index(target)
        return float(self.mean_asr[i, j]), float(self.std_asr[i, j])

    def rows(self) -> list[dict]:
        rows = []
        for i, v in enumerate(self.variants):
            secs = ""
            if self.record_timings and self.seconds and v in self.seconds:
                secs = repr(float(self.seconds[v]))
            for j, t in enumerate(self.targets):
                rows.append({"variant": v, "target": t, "mean_asr": repr(float(self.mean_asr[i, j])),
                             "std_asr": repr(float(self.std_asr[i, j])), "n_eval": str(self.n_eval),
                             "seconds": secs})
        return rows

    def grand_mean(self, variant: str) -> float:
        return float(self.mean_asr[self.variants.index(variant)].mean())

    def grand_mean_reps(self, variant: str) -> np.ndarray:
        """Per-repetition mean ASR over all targets."""
        return self.asr[self.variants.index(variant)].mean(axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransferReport):
            return NotImplemented
        return self.rows() == other.rows()


def report_csv(report: TransferReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report.rows())
    return buf.getvalue()


def emit_report(report: TransferReport, out_dir, cfg: ExperimentConfig | None = None,
                plot_data: bool = True) -> dict[str, Path]:
    """Write report.csv, config.json, plot-data CSVs and (if measured) timings.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"report": out / "report.csv"}
    files["report"].write_text(report_csv(report))
    if cfg is not None:
        snap = {"config": cfg.to_dict(), "config_hash": report.config_hash or cfg.config_hash(),
                "seeds": report.seeds}
        files["config"] = out / "config.json"
        files["config"].write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    if plot_data:
        for i, v in enumerate(report.variants):
            p = out / f"plot_{_slug(v)}.csv"
            lines = ["x,y,sigma"] + [f"{t},{report.mean_asr[i, j]!r},{report.std_asr[i, j]!r}"
                                     for j, t in enumerate(report.targets)]
            p.write_text("\n".join(lines) + "\n")
            files[f"plot_{v}"] = p
    if report.seconds:
        p = out / "timings.csv"
        p.write_text("variant,seconds\n" + "".join(f"{v},{s!r}\n" for v, s in report.seconds.items()))
        files["timings"] = p
    if report.failed:
        p = out / "FAILED"
        p.write_text(report.failed + "\n")
        files["failed"] = p
    return files


def read_report(path) -> TransferReport:
    """Parse report.csv back into a TransferReport (table content only)."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.csv"
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    targets = list(dict.fromkeys(r["target"] for r in rows))
    mean = np.full((len(variants), len(targets)), np.nan)
    std = np.full_like(mean, np.nan)
    seconds = {}
    n_eval = 0
    for r in rows:
        i, j = variants.index(r["variant"]), targets.index(r["target"])
        mean[i, j] = float(r["mean_asr"])
        std[i, j] = float(r["std_asr"])
        n_eval = int(r["n_eval"])
        if r["seconds"]:
            seconds[r["variant"]] = float(r["seconds"])
    return TransferReport(variants, targets, mean, std, n_eval, seconds or None,
                          record_timings=bool(seconds))


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in text)


def _std(values: np.ndarray) -> np.ndarray:
    return values.std(axis=-1, ddof=1) if values.shape[-1] > 1 else np.zeros(values.shape[:-1])


# experiments ---------------------------------------------------------------------------


def run_transfer_matrix(cfg: ExperimentConfig, bench: Workbench | None = None,
                        out_dir=None) -> TransferReport:
    """ASR of every (variant, target) cell, mean and std over ``cfg.repetitions`` seeded runs.

    ``seconds`` is wall time actually spent, so a deterministic variant is charged for one run.
    """
    bench = bench or prepare(cfg)
    variants = [Variant.parse(v) for v in cfg.variants]
    names = list(bench.targets)
    n = len(bench.subset)
    R = cfg.repetitions
    successes = np.full((len(variants), len(names), R), -1, dtype=np.int64)
    seconds = {v.name: 0.0 for v in variants}
    # deterministic variants are attacked once and their counts reused for every repetition
    jobs = [(i, r) for i, v in enumerate(variants) for r in range(R if v.stochastic else 1)]

    def job(i: int, r: int):
        t0 = time.perf_counter()
        adv = attack_subset(bench, variants[i], cfg, r)
        elapsed = time.perf_counter() - t0
        return i, r, elapsed, [transfer_counts(adv, bench.targets[t])[0] for t in names]

    def finish(i, r, elapsed, counts):
        seconds[variants[i].name] += elapsed
        if variants[i].stochastic:
            successes[i, :, r] = counts
        else:
            successes[i] = np.asarray(counts)[:, None]
        log.info("%s rep %d: %s (%.1fs)", variants[i].name, r,
                 ", ".join(f"{t}={c / n:.3f}" for t, c in zip(names, counts)), elapsed)

    failure = None
    try:
        workers = min(worker_count(), len(jobs))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for result in pool.map(lambda ir: job(*ir), jobs):
                    finish(*result)
        else:
            for i, r in jobs:
                finish(*job(i, r))
    except Exception as exc:
        failure = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        done = successes >= 0
        asr = np.where(done, successes / n, np.nan)
        runs = done.sum(axis=2)
        # moments from integer counts, so identical repetitions give a std of exactly zero
        counts = np.where(done, successes, np.nan)
        mean_asr = np.divide(np.where(done, successes, 0).sum(axis=2), runs * n,
                             out=np.full(runs.shape, np.nan), where=runs > 0)
        report = TransferReport(
            [v.name for v in variants], names, mean_asr,
            _std(counts) / n, n, seconds, asr, successes, cfg.config_hash(),
            {"master": cfg.seed, **{f"{v.name}/{r}": [derive_seed(cfg.seed, "attack", v.method.value, r),
                                                      derive_seed(cfg.seed, "plan", v.name, r)]
                                    for v in variants for r in range(R)}},
            cfg.record_timings, failure)
        if out_dir is not None:
            emit_report(report, out_dir, cfg)
    return report


@dataclass
class AblationTable:
    axis: str
    strategy: str
    values: list
    mean_asr: list[float]
    std_asr: list[float]
    per_target: list[list[float]]
    targets: list[str]

    def csv(self) -> str:
        lines = ["x,y,sigma"] + [f"{x},{m!r},{s!r}" for x, m, s in zip(self.values, self.mean_asr, self.std_asr)]
        return "\n".join(lines) + "\n"


def ablation_sweep(axis: str, grid, cfg: ExperimentConfig, strategy="N", bench: Workbench | None = None,
                   method: str | Method = Method.IFGSM, out_dir=None) -> AblationTable:
    """Vary one FP hyper-parameter (gamma, prob or position) with everything else pinned."""
    field_name = {"gamma": "gamma", "prob": "prob", "p": "prob", "position": "position"}.get(axis)
    if field_name is None:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.OFF:
        raise ConfigError("ablation needs an active FP strategy")
    bench = bench or prepare(cfg)
    variant = Variant(Method.parse(method), strategy)
    means, stds, per_target = [], [], []
    for value in grid:
        value = int(value) if field_name == "position" else float(value)
        fp = replace(cfg.fp_for(strategy), **{field_name: value})
        if field_name == "position" and not 1 <= value <= bench.surrogate.spec.num_blocks:
            raise ConfigError(f"position {value} outside 1..{bench.surrogate.spec.num_blocks}")
        point = replace(cfg, variants=(variant.name,),
                        **({"fpa_r": fp} if strategy is Strategy.RANDOM else {"fpa_n": fp}))
        rep = run_transfer_matrix(point, bench)
        grand = rep.grand_mean_reps(variant.name)
        means.append(float(grand.mean()))
        stds.append(float(_std(grand[None])[0]))
        per_target.append([float(v) for v in rep.mean_asr[0]])
    table = AblationTable(axis, strategy.value, list(grid), means, stds, per_target, list(bench.targets))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{field_name}_{strategy.value}.csv").write_text(table.csv())
    return table


@dataclass
class RuntimeResult:
    variant: str
    seconds: float  # median total over timed repeats
    per_iteration: float
    samples: list[float]


def measure_runtime(variants, cfg: ExperimentConfig, bench: Workbench | None = None,
                    repeats: int = 3, warmup: bool = True) -> dict[str, RuntimeResult]:
    """Median wall-clock of a full attack over the eval subset, after one untimed warm-up.

    Variants are timed round-robin, one run each per round with a rotating start,
    so slow drift in machine load lands on all of them alike. The pseudo-variant ``noop`` runs
    zero iterations.
    """
    bench = bench or prepare(cfg)
    runs = {}
    for name in variants:
        if name == "noop":
            runs[name] = (Variant(Method.IFGSM), replace(cfg, attack=replace(cfg.attack, iterations=0)))
        else:
            runs[name] = (Variant.parse(name), cfg)

    def once(name):
        variant, run_cfg = runs[name]
        t0 = time.perf_counter()
        attack_subset(bench, variant, run_cfg, 0)
        return time.perf_counter() - t0

    if warmup:
        for name in runs:
            once(name)
    samples = {name: [] for name in runs}
    order = list(runs)
    for k in range(repeats):
        # rotate the start so no variant always runs in the same slot of a round
        for name in order[k % len(order):] + order[:k % len(order)]:
            samples[name].append(once(name))
    iters = max(1, cfg.attack.iterations)
    results = {}
    for name, vals in samples.items():
        med = statistics.median(vals)
        results[name] = RuntimeResult(name, med, med / iters, vals)
    return results


def runtime_csv(results: dict[str, RuntimeResult]) -> str:
    lines = ["variant,seconds,per_iteration"] + [f"{r.variant},{r.seconds!r},{r.per_iteration!r}"
                                                 for r in results.values()]
    return "\n".join(lines) + "\n"
