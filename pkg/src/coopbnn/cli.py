"""Command line: ``coopbnn run | compare | gen-data``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import data
from .experiment import ConfigError, compare, expand_sweep, format_comparison, load_config, run


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopbnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--seeds", type=_seeds, help="comma-separated seed override")
    r.add_argument("--workers", type=int, default=1, help="seeds trained in parallel threads")

    c = sub.add_parser("compare", help="side-by-side table of report.json files")
    c.add_argument("reports", nargs="+")
    c.add_argument("--json", action="store_true", help="emit the table as JSON")

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--generator", choices=sorted(data.GENERATORS), default="heteroscedastic")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--x-low", type=float, default=0.0)
    g.add_argument("--x-high", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    return p


def _fail(err: Exception, code: int = 1) -> int:
    block = {"error": {"type": type(err).__name__, "message": str(err)}}
    if isinstance(err, ConfigError):
        block["error"]["field"] = err.path
    print(json.dumps(block), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seeds:
                cfg = dataclasses.replace(cfg, seeds=args.seeds)
            out = args.out or cfg.output_dir
            runs = expand_sweep(cfg)
            code = 0
            for label, sub in runs:
                sub_out = out if out is None or len(runs) == 1 else f"{out}/{label}"
                report = run(sub, sub_out, workers=args.workers)
                failed = [s for s, rec in report["per_seed"].items() if "error" in rec]
                summary = {k: {"mean": v["mean"], "std": v["std"]}
                           for k, v in report["aggregate"].items()}
                print(json.dumps({"name": report["name"], "output_dir": sub_out,
                                  "aggregate": summary, "failed_seeds": failed}, indent=2))
                if len(failed) == len(report["seeds"]):
                    code = 1
            return code
        if args.command == "compare":
            reports = []
            for path in args.reports:
                with open(path, encoding="utf-8") as fh:
                    reports.append(json.load(fh))
            table = compare(reports)
            print(json.dumps(table, indent=2) if args.json else format_comparison(table))
            return 0
        ds = data.GENERATORS[args.generator](args.n, args.x_low, args.x_high, args.seed)
        data.write_csv(args.out, ds)
        return 0
    except ConfigError as err:
        return _fail(err, 2)
    except (OSError, ValueError) as err:
        return _fail(err, 1)


if __name__ == "__main__":
    sys.exit(main())
