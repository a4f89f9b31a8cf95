"""Epistemic variance and aleatoric Wasserstein distance as the training set grows.

    python scripts/data_size_trend.py --out runs/data_size
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from coopbnn.experiment import expand_sweep, load_config, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/data_size"))
    ap.add_argument("--config", type=Path, default=CONFIGS / "hetero_data_size.yaml")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    print(f"{'N':>5} {'epistemic var':>14} {'wasserstein':>12} {'aleatoric RMSE':>15}")
    for label, cfg in expand_sweep(load_config(args.config)):
        report = run(cfg, args.out / label)
        per_seed = [r["metrics"] for r in report["per_seed"].values() if "metrics" in r]
        med = {k: np.median([m[k] for m in per_seed]) for k in per_seed[0]}
        print(f"{cfg.data.n:>5} {med['epistemic_var_mean/in_support']:>14.4f} "
              f"{med['wasserstein/in_support']:>12.4f} {med['aleatoric_std_rmse/in_support']:>15.4f}")


if __name__ == "__main__":
    main()
