"""Transfer-ASR matrix (surrogate convnet_a against convnet_b / vit / mixer).

Prints the table plus the grand mean per variant and FPA minus baseline gaps.

    python scripts/run_transfer.py [--config configs/desk.json] [key=value ...]
"""

import argparse

from fpalab import harness as H

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("overrides", nargs="*")
    args = p.parse_args()
    cfg = H.ExperimentConfig.from_dict(H.apply_overrides(H.load_config(args.config).to_dict(), args.overrides))
    report = H.run_transfer_matrix(cfg, out_dir=cfg.out_dir)
    print(H.report_csv(report))
    for v in report.variants:
        reps = report.grand_mean_reps(v)
        print(f"{v:>16}: grand mean {reps.mean():.4f} (sd {reps.std(ddof=1) if len(reps) > 1 else 0:.4f})")
