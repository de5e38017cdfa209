"""Command-line entry point: ``fpalab <subcommand> --config <path> [--seed N] [--out DIR] [key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import harness as H
from .attacks import check_budget
from .data import load_dataset
from .errors import ConfigError, FormatError, InvariantError
from .fp import Strategy, dump_feature_maps, fp_forward
from .models import insert_fp_layer
from .tensor import Tensor

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
COMMANDS = ("train", "attack", "transfer", "ablate", "bench", "viz", "selftest")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpalab", description="Feature-permutation transfer attack lab")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--axis", default="gamma", help="ablate: gamma, prob or position")
    p.add_argument("--grid", help="ablate: comma-separated grid values")
    p.add_argument("--strategy", default="N", help="ablate/viz: FP strategy (R or N)")
    p.add_argument("--variants", help="bench: comma-separated variants (default: config variants + noop)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, dotted keys allowed")
    return p


def resolve_config(args) -> H.ExperimentConfig:
    data = H.ExperimentConfig().to_dict()
    if args.config:
        try:
            data = {**data, **json.loads(Path(args.config).read_text())}
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    data = H.apply_overrides(data, args.overrides)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out_dir"] = args.out
    try:
        return H.ExperimentConfig.from_dict(data)
    except (jsonschema.ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid config: {getattr(exc, 'message', exc)}") from None


def _out(cfg: H.ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg, args) -> None:
    dataset = load_dataset(cfg.dataset, cfg.dataset_format)
    ckpt_dir = Path(args.out) if args.out else Path(cfg.checkpoint_dir)
    for name, (model, acc) in H.train_zoo(dataset, ckpt_dir, cfg.seed, cfg.training).items():
        print(f"{name}: {model.num_parameters()} params, test accuracy {acc[-1]:.4f} -> {ckpt_dir / (name + '.ckpt')}")


def cmd_attack(cfg, args) -> None:
    bench = H.prepare(cfg)
    variant = H.Variant.parse(cfg.variants[0])
    adv = H.attack_subset(bench, variant, cfg, 0)
    check_budget(adv.x, adv.x_adv, cfg.attack.epsilon)
    out = _out(cfg)
    np.savez_compressed(out / "adversarial.npz", x=adv.x, x_adv=adv.x_adv, y=adv.y, index=bench.subset)
    for name, target in bench.targets.items():
        print(f"{variant.name} -> {name}: ASR {H.evaluate_transfer(adv, target):.4f}")


def cmd_transfer(cfg, args) -> None:
    bench = H.prepare(cfg)
    report = H.run_transfer_matrix(cfg, bench, out_dir=_out(cfg))
    print(H.report_csv(report), end="")


def cmd_ablate(cfg, args) -> None:
    defaults = {"gamma": "0,0.2,0.4,0.6,0.8,1", "prob": "0,0.25,0.5,0.75,1", "p": "0,0.25,0.5,0.75,1"}
    raw = args.grid or defaults.get(args.axis)
    bench = H.prepare(cfg)
    if raw is None:
        grid = list(range(1, bench.surrogate.spec.num_blocks + 1))
    else:
        try:
            grid = [float(v) for v in raw.split(",")]
        except ValueError:
            raise ConfigError(f"grid must be comma-separated numbers, got {raw!r}") from None
    table = H.ablation_sweep(args.axis, grid, cfg, args.strategy, bench, out_dir=_out(cfg))
    print(table.csv(), end="")


def cmd_bench(cfg, args) -> None:
    variants = args.variants.split(",") if args.variants else [*cfg.variants, "noop"]
    results = H.measure_runtime(variants, cfg)
    text = H.runtime_csv(results)
    (_out(cfg) / "runtime.csv").write_text(text)
    print(text, end="")


def cmd_viz(cfg, args) -> None:
    bench = H.prepare(cfg)
    fp = cfg.fp_for(Strategy.parse(args.strategy))
    sur = insert_fp_layer(bench.surrogate, fp, H.derive_seed(cfg.seed, "viz"))
    captured = {}

    def hook(i, x):
        if i == fp.position:
            plan = sur.sample_plan(x.shape[0])
            after = fp_forward(x, plan)
            captured["maps"] = (x.data, after.data)
            return after
        return x

    sur.model(Tensor(bench.x[:1]), hook=hook)
    path = dump_feature_maps(*captured["maps"], _out(cfg) / f"features_{fp.strategy.value}_pos{fp.position}.pgm")
    print(path)


def cmd_selftest(cfg, args) -> None:
    from .selftest import run_selftest

    run_selftest(cfg.seed)


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "transfer": cmd_transfer, "ablate": cmd_ablate,
            "bench": cmd_bench, "viz": cmd_viz, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, args)
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
