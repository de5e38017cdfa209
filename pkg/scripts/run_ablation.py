"""Sweep one FP hyper-parameter (gamma, prob or position) with everything else pinned.

    python scripts/run_ablation.py gamma 0,0.2,0.4,0.6,0.8,1 [--strategy N] [--config ...]
"""

import argparse

from fpalab import harness as H

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("axis", choices=["gamma", "prob", "position"])
    p.add_argument("grid")
    p.add_argument("--strategy", default="N")
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("overrides", nargs="*")
    args = p.parse_args()
    cfg = H.ExperimentConfig.from_dict(H.apply_overrides(H.load_config(args.config).to_dict(), args.overrides))
    grid = [float(v) for v in args.grid.split(",")]
    table = H.ablation_sweep(args.axis, grid, cfg, args.strategy, out_dir=cfg.out_dir)
    print(table.csv(), end="")
