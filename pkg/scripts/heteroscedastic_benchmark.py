"""BNN-VE against beta-NLL MVE baselines on the heteroscedastic toy problem.

    python scripts/heteroscedastic_benchmark.py --out runs/hetero

Writes one report per method under ``--out`` and prints the comparison table.
"""
import argparse
import dataclasses
import logging
from pathlib import Path

from coopbnn.experiment import compare, expand_sweep, format_comparison, load_config, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/hetero"))
    ap.add_argument("--seeds", type=int, nargs="+", help="override the configured seeds")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    jobs = [("bnn_ve", load_config(CONFIGS / "hetero_bnn_ve.yaml"))]
    jobs += expand_sweep(load_config(CONFIGS / "hetero_mve_beta.yaml"))
    reports = []
    for label, cfg in jobs:
        if args.seeds:
            cfg = dataclasses.replace(cfg, seeds=args.seeds)
        reports.append(run(cfg, args.out / label, workers=args.workers))
    print(format_comparison(compare(reports)))


if __name__ == "__main__":
    main()
