"""Plot mean, aleatoric and epistemic bands from a run directory's plot CSVs.

    python scripts/plot_uncertainty.py runs/hetero/bnn_ve/seed_0 -o bnn_ve.png

Needs matplotlib, which the package itself does not depend on.
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("seed_dir", type=Path)
    ap.add_argument("-o", "--output", type=Path, default=Path("uncertainty.png"))
    args = ap.parse_args()

    tables = [read_table(p) for p in sorted(args.seed_dir.glob("plot_*.csv"))]
    if not tables:
        raise SystemExit(f"no plot_*.csv files in {args.seed_dir}")
    t = {k: np.concatenate([tb[k] for tb in tables]) for k in tables[0]}
    order = np.argsort(t["x"])
    t = {k: v[order] for k, v in t.items()}

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    total = np.sqrt(t["aleatoric_std"] ** 2 + t["epistemic_std"] ** 2)
    top.fill_between(t["x"], t["pred_mean"] - 2 * total, t["pred_mean"] + 2 * total,
                     alpha=0.25, label="±2 total std")
    top.plot(t["x"], t["truth_mean"], "k--", lw=1, label="truth")
    top.plot(t["x"], t["pred_mean"], lw=1.5, label="predictive mean")
    top.legend(loc="upper left")
    bottom.plot(t["x"], t["truth_std"], "k--", lw=1, label="true noise std")
    bottom.plot(t["x"], t["aleatoric_std"], label="aleatoric std")
    bottom.plot(t["x"], t["epistemic_std"], label="epistemic std")
    bottom.set_xlabel("x")
    bottom.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(args.output, dpi=130)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
