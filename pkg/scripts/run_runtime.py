"""Wall-clock per variant over the eval subset (warm-up excluded, median of 3).

    python scripts/run_runtime.py [--config configs/desk.json] [--variants IFGSM,IFGSM+FPA-R,...]
"""

import argparse

from fpalab import harness as H

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/desk.json")
    p.add_argument("--variants", default="noop,IFGSM,IFGSM+FPA-R,IFGSM+FPA-N,SIM")
    p.add_argument("overrides", nargs="*")
    args = p.parse_args()
    cfg = H.ExperimentConfig.from_dict(H.apply_overrides(H.load_config(args.config).to_dict(), args.overrides))
    res = H.measure_runtime(args.variants.split(","), cfg)
    print(H.runtime_csv(res), end="")
    base = res.get("IFGSM")
    if base:
        for name, r in res.items():
            print(f"{name:>14}: {r.per_iteration / base.per_iteration:.3f}x IFGSM per iteration")
