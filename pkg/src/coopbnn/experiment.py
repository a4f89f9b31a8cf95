"""Declarative experiment runs: config in, metrics report + artifacts out."""
from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__, nn
from .coop import CoopConfig, coop_train
from .data import (GENERATORS, Dataset, Scaler, SplitSpec, load_csv, split, synthetic_test_sets)
from .inference import (BbbConfig, SamplerConfig, TrainConfig, mc_dropout_ensemble,
                        sample_end_to_end, sample_psgld, train_bbb, train_ensemble, train_map)
from .losses import BetaNLLLoss, GaussianNLLLoss, MSELoss, PriorSpec
from .metrics import (GaussianPrediction, conformal_calibrate, conformal_coverage, mae,
                      posterior_predictive, rmse, tll, wasserstein)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "coopbnn.report/1"
PLOT_SCHEMA = "coopbnn.plot/1"
PLOT_COLUMNS = ["x", "truth_mean", "truth_std", "pred_mean", "aleatoric_std", "epistemic_std"]

METHODS = ("me_mse", "mve_beta_nll", "mve_ensemble", "mve_mc_dropout", "bnn_end_to_end", "bnn_ve")
METRICS = ("rmse", "mae", "tll", "tll_epistemic", "wasserstein", "coverage",
           "mean_rmse_truth", "aleatoric_std_rmse", "aleatoric_std_mean",
           "epistemic_var_mean", "epistemic_std_mean")
LOWER_IS_BETTER = {"rmse", "mae", "wasserstein", "mean_rmse_truth", "aleatoric_std_rmse",
                   "interval_length"}
HIGHER_IS_BETTER = {"tll", "tll_epistemic"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    generator: str | None = "heteroscedastic"
    n: int = 500
    x_low: float = 0.0
    x_high: float = 10.0
    test_n: int = 1000
    csv: str | None = None
    target_columns: list = field(default_factory=lambda: [-1])
    header: bool = True
    split: SplitSpec = SplitSpec(0.8, 0.0, 0)
    standardize: bool = True
    aleatoric_eval_range: list | None = None


@dataclass(frozen=True)
class MethodConfig:
    name: str = "bnn_ve"
    inference: str = "psgld"
    beta: float = 0.0
    n_members: int = 5
    mc_passes: int = 100
    K: int = 2
    fixed_noise_var: float | None = None


@dataclass(frozen=True)
class ArchConfig:
    hidden: list = field(default_factory=lambda: [256, 256])
    activation: str = "tanh"
    dropout_rate: float = 0.1
    var_hidden: list = field(default_factory=lambda: [5])
    bbb_hidden: list = field(default_factory=lambda: [50])


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    data: DataConfig = DataConfig()
    method: MethodConfig = MethodConfig()
    architecture: ArchConfig = ArchConfig()
    training: TrainConfig = TrainConfig()
    variance_training: TrainConfig = TrainConfig(epochs=5000, lr=1e-3, patience=100)
    sampler: SamplerConfig = SamplerConfig()
    bbb: BbbConfig = BbbConfig()
    prior_precision: float = 0.1
    seeds: list = field(default_factory=lambda: [0])
    metrics: list = field(default_factory=lambda: ["rmse"])
    conformal_alpha: float = 0.1
    output_dir: str | None = None
    # dotted field path -> list of values; one run per combination
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, path: str):
    if raw is None:
        return cls()
    if dataclasses.is_dataclass(raw):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(path or "<root>", str(err)) from err


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw or {})


def _set_path(raw: dict, dotted: str, value):
    node = raw
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"sweep.{dotted}", f"{key!r} is not a section")
    node[leaf] = value


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One ``(label, config)`` per combination of the sweep values."""
    if not cfg.sweep:
        return [(cfg.name, cfg)]
    base = cfg.to_dict()
    base["sweep"] = {}
    keys = sorted(cfg.sweep)
    for k in keys:
        if not isinstance(cfg.sweep[k], list) or not cfg.sweep[k]:
            raise ConfigError(f"sweep.{k}", "needs a non-empty list of values")
    out = []
    for combo in itertools.product(*(cfg.sweep[k] for k in keys)):
        raw = copy.deepcopy(base)
        for k, v in zip(keys, combo):
            _set_path(raw, k, v)
        label = "_".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
        raw["name"] = f"{cfg.name}[{label}]"
        try:
            out.append((label, config_from_dict(raw)))
        except ConfigError as err:
            raise ConfigError(f"sweep.{err.path}", str(err)) from err
    return out


def validate(cfg: ExperimentConfig) -> None:
    m, d = cfg.method, cfg.data
    if m.name not in METHODS:
        raise ConfigError("method.name", f"unknown method {m.name!r}; choose from {METHODS}")
    if m.name == "mve_beta_nll" and not 0.0 <= m.beta <= 1.0:
        raise ConfigError("method.beta", "beta must lie in [0, 1]")
    if m.name == "bnn_ve":
        if m.inference not in ("psgld", "mc_dropout", "bbb"):
            raise ConfigError("method.inference", "must be psgld, mc_dropout or bbb")
        if m.K < 1:
            raise ConfigError("method.K", "must be at least 1")
    if m.name == "mve_ensemble" and m.n_members < 1:
        raise ConfigError("method.n_members", "must be at least 1")
    if m.fixed_noise_var is not None and not m.fixed_noise_var > 0:
        raise ConfigError("method.fixed_noise_var", "must be positive")
    if not cfg.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if d.csv is None:
        if d.generator not in GENERATORS:
            raise ConfigError("data.generator", f"unknown generator {d.generator!r}")
        if d.n < 1 or not d.x_low < d.x_high:
            raise ConfigError("data", "need n >= 1 and x_low < x_high")
    bad = [x for x in cfg.metrics if x not in METRICS]
    if bad:
        raise ConfigError("metrics", f"unknown metric {bad[0]!r}; choose from {METRICS}")
    if not 0 < cfg.conformal_alpha < 1:
        raise ConfigError("conformal_alpha", "must lie in (0, 1)")
    if cfg.prior_precision <= 0:
        raise ConfigError("prior_precision", "must be positive")
    if not isinstance(cfg.sweep, dict):
        raise ConfigError("sweep", "must map dotted field paths to lists of values")


# --------------------------------------------------------------------------- data

@dataclass
class SeedData:
    train: Dataset
    val: Dataset | None
    tests: dict[str, Dataset]
    scaler: Scaler


def build_data(cfg: DataConfig, seed: int) -> SeedData:
    if cfg.csv is not None:
        full = load_csv(cfg.csv, cfg.target_columns, cfg.header)
        train, val, test = split(full, dataclasses.replace(cfg.split, seed=seed))
        tests = {"test": test}
        val = val if len(val) else None
    else:
        gen = GENERATORS[cfg.generator]
        train = gen(cfg.n, cfg.x_low, cfg.x_high, seed)
        tests = synthetic_test_sets(cfg.generator, cfg.test_n, seed=10_000 + seed)
        val = synthetic_test_sets(cfg.generator, cfg.test_n, seed=20_000 + seed)["in_support"]
    scaler = Scaler.fit(train)
    if not cfg.standardize:
        d_in, d_out = train.X.shape[1], train.y.shape[1]
        scaler = Scaler(np.zeros(d_in), np.ones(d_in), np.zeros(d_out), np.ones(d_out), len(train))
    return SeedData(train, val, tests, scaler)


# --------------------------------------------------------------------------- methods

@dataclass
class Fitted:
    predict: Callable[[np.ndarray], GaussianPrediction]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    lmglk: list[float] = field(default_factory=list)
    selected: int | None = None


def fit_method(cfg: ExperimentConfig, train: Dataset, seed: int, y_var_scale=1.0) -> Fitted:
    """Train the configured method on (standardized) ``train``.

    ``y_var_scale`` is the target variance of the scaler; a fixed noise
    variance given in original units is divided by it.
    """
    m, a = cfg.method, cfg.architecture
    d_in, d_out = train.X.shape[1], train.y.shape[1]
    prior = PriorSpec(cfg.prior_precision)
    tcfg = dataclasses.replace(cfg.training, seed=seed, prior_precision=cfg.prior_precision)
    scfg = dataclasses.replace(cfg.sampler, seed=seed)

    if m.name == "me_mse":
        spec = nn.mean_spec(d_in, a.hidden, d_out, a.activation)
        theta = train_map(spec, train, MSELoss(), tcfg)
        resid = nn.predict_heads(spec, theta, train.X)["mean"] - train.y
        noise = np.mean(resid ** 2, axis=0)
        return Fitted(lambda X: GaussianPrediction(
            nn.predict_heads(spec, theta, X)["mean"],
            np.broadcast_to(noise, (len(X), d_out)).copy(), np.zeros((len(X), d_out))),
            {"theta": theta, "noise_var": noise})

    if m.name == "mve_beta_nll":
        spec = nn.mve_spec(d_in, a.hidden, d_out, a.activation)
        theta = train_map(spec, train, BetaNLLLoss(m.beta), tcfg)

        def predict(X):
            h = nn.predict_heads(spec, theta, X)
            return GaussianPrediction(h["mean"], h["var"], np.zeros_like(h["mean"]))
        return Fitted(predict, {"theta": theta})

    if m.name == "mve_ensemble":
        spec = nn.mve_spec(d_in, a.hidden, d_out, a.activation)
        seeds = [seed * 1000 + k for k in range(m.n_members)]
        ens = train_ensemble(spec, train, BetaNLLLoss(m.beta), m.n_members, seeds, tcfg)
        return Fitted(lambda X: posterior_predictive(ens, X), {"samples": np.stack(ens.samples)})

    if m.name == "mve_mc_dropout":
        spec = nn.mve_spec(d_in, a.hidden, d_out, a.activation, a.dropout_rate)
        theta = train_map(spec, train, BetaNLLLoss(m.beta), tcfg)
        ens = mc_dropout_ensemble(spec, theta, m.mc_passes, seed)
        return Fitted(lambda X: posterior_predictive(ens, X), {"theta": theta})

    if m.name == "bnn_end_to_end":
        spec = nn.mve_spec(d_in, a.hidden, d_out, a.activation)
        warm = train_map(spec, train, GaussianNLLLoss(var_head="var"), tcfg)
        ens = sample_end_to_end(spec, warm, train, prior, scfg)
        return Fitted(lambda X: posterior_predictive(ens, X), {"samples": np.stack(ens.samples)})

    # bnn_ve
    if m.fixed_noise_var is not None:
        spec = nn.mean_spec(d_in, a.hidden, d_out, a.activation)
        noise = (m.fixed_noise_var / np.asarray(y_var_scale, dtype=float)).reshape(1, -1)
        theta = train_map(spec, train, GaussianNLLLoss(fixed_var=1.0), tcfg)
        ens = sample_psgld(spec, theta, train, np.broadcast_to(noise, train.y.shape), prior, scfg)
        return Fitted(lambda X: posterior_predictive(ens, X, fixed_var=noise),
                      {"samples": np.stack(ens.samples)})

    hidden = a.bbb_hidden if m.inference == "bbb" else a.hidden
    dropout = a.dropout_rate if m.inference == "mc_dropout" else 0.0
    spec = nn.mean_spec(d_in, hidden, d_out, a.activation, dropout)
    ccfg = CoopConfig(
        K=m.K, mean_cfg=tcfg,
        var_cfg=dataclasses.replace(cfg.variance_training, seed=seed,
                                    prior_precision=cfg.prior_precision),
        bnn_cfg=scfg, bbb_cfg=dataclasses.replace(cfg.bbb, seed=seed),
        var_hidden=tuple(a.var_hidden), inference=m.inference, prior=prior,
        mc_passes=m.mc_passes)
    res = coop_train(spec, train, ccfg)
    ens = res.ensemble
    arrays = {"phi": res.phi, "map_params": res.map_params}
    if ens.provenance != "mc_dropout":
        arrays["samples"] = np.stack(ens.samples)
    return Fitted(lambda X: posterior_predictive(ens, X), arrays, res.lmglk, res.selected)


# --------------------------------------------------------------------------- evaluation

def _to_original(pred: GaussianPrediction, scaler: Scaler) -> GaussianPrediction:
    return GaussianPrediction(scaler.inverse_y(pred.mean), scaler.inverse_var(pred.aleatoric_var),
                              scaler.inverse_var(pred.epistemic_var))


def evaluate(pred: GaussianPrediction, ds: Dataset, names, eval_range=None) -> dict[str, float]:
    out = {}
    for name in names:
        if name == "rmse":
            out[name] = rmse(pred, ds.y)
        elif name == "mae":
            out[name] = mae(pred, ds.y)
        elif name == "tll":
            out[name] = tll(pred, ds.y)
        elif name == "tll_epistemic":
            target = ds.truth_mean if ds.has_truth else ds.y
            out[name] = tll(pred, target, component="epistemic")
        elif name == "epistemic_var_mean":
            out[name] = float(np.mean(pred.epistemic_var))
        elif name == "epistemic_std_mean":
            out[name] = float(np.mean(np.sqrt(pred.epistemic_var)))
        elif name == "aleatoric_std_mean":
            out[name] = float(np.mean(np.sqrt(pred.aleatoric_var)))
        elif name in ("wasserstein", "mean_rmse_truth", "aleatoric_std_rmse"):
            if not ds.has_truth:
                continue
            if name == "wasserstein":
                out[name] = wasserstein(pred, ds.truth_mean, ds.truth_noise_var)
            elif name == "mean_rmse_truth":
                out[name] = rmse(pred, ds.truth_mean)
            else:
                keep = np.ones(len(ds), bool)
                if eval_range is not None:
                    x = ds.X[:, 0]
                    keep = (x >= eval_range[0]) & (x <= eval_range[1])
                gap = np.sqrt(pred.aleatoric_var[keep]) - np.sqrt(ds.truth_noise_var[keep])
                out[name] = float(np.sqrt(np.mean(np.sum(gap ** 2, axis=1))))
    return out


def _predict_original(fitted: Fitted, ds: Dataset, scaler: Scaler) -> GaussianPrediction:
    return _to_original(fitted.predict(scaler.transform_x(ds.X)), scaler)


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> dict[str, Any]:
    """Train and evaluate one seed; returns a flat ``{"metric/split": value}`` record."""
    t0 = time.perf_counter()
    sd = build_data(cfg.data, seed)
    fitted = fit_method(cfg, sd.scaler.transform(sd.train), seed, sd.scaler.y_std ** 2)
    record: dict[str, Any] = {"metrics": {}}
    preds = {}
    wanted = [m for m in cfg.metrics if m != "coverage"]
    rng = cfg.data.aleatoric_eval_range
    for split_name, ds in sd.tests.items():
        pred = _predict_original(fitted, ds, sd.scaler)
        preds[split_name] = pred
        vals = evaluate(pred, ds, wanted, rng if split_name != "extrapolation" else None)
        for k, v in vals.items():
            record["metrics"][f"{k}/{split_name}"] = v
    if "coverage" in cfg.metrics and sd.val is not None and len(sd.val):
        cal = conformal_calibrate(_predict_original(fitted, sd.val, sd.scaler), sd.val.y,
                                  cfg.conformal_alpha)
        for split_name, ds in sd.tests.items():
            cov = conformal_coverage(cal, preds[split_name], ds.y)
            record["metrics"][f"coverage/{split_name}"] = cov["coverage"]
            record["metrics"][f"interval_length/{split_name}"] = cov["mean_interval_length"]
    if fitted.lmglk:
        record["lmglk"] = fitted.lmglk
        record["selected_iteration"] = fitted.selected
    record["wall_clock_s"] = time.perf_counter() - t0

    if out_dir is not None:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        np.savez(seed_dir / "params.npz", **fitted.arrays)
        if sd.train.X.shape[1] == 1 and sd.train.y.shape[1] == 1:
            for split_name, ds in sd.tests.items():
                write_plot_table(seed_dir / f"plot_{split_name}.csv", ds, preds[split_name])
    return record


def write_plot_table(path, ds: Dataset, pred: GaussianPrediction) -> None:
    order = np.argsort(ds.X[:, 0])
    tm = ds.truth_mean[:, 0] if ds.has_truth else np.full(len(ds), np.nan)
    ts = np.sqrt(ds.truth_noise_var[:, 0]) if ds.has_truth else np.full(len(ds), np.nan)
    cols = [ds.X[:, 0], tm, ts, pred.mean[:, 0], np.sqrt(pred.aleatoric_var[:, 0]),
            np.sqrt(pred.epistemic_var[:, 0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_COLUMNS)
        for i in order:
            w.writerow([repr(float(c[i])) for c in cols])


def aggregate(per_seed: dict) -> dict[str, dict[str, float]]:
    keys = sorted({k for rec in per_seed.values() if "metrics" in rec for k in rec["metrics"]})
    agg = {}
    for k in keys:
        vals = np.array([rec["metrics"][k] for rec in per_seed.values()
                         if "metrics" in rec and k in rec["metrics"]])
        agg[k] = {"mean": float(vals.mean()), "std": float(vals.std()),
                  "median": float(np.median(vals)), "n": int(vals.size)}
    return agg


def run(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> dict:
    """Run every seed, write ``report.json`` (and per-seed artifacts) when ``out_dir`` is set."""
    out_dir = Path(out_dir) if out_dir is not None else (
        Path(cfg.output_dir) if cfg.output_dir else None)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def one(seed):
        try:
            return seed, run_seed(cfg, seed, out_dir)
        except Exception as err:  # recorded, remaining seeds continue
            log.exception("seed %s failed", seed)
            return seed, {"error": {"type": type(err).__name__, "message": str(err)}}

    seeds = list(cfg.seeds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    per_seed = {str(s): rec for s, rec in results}
    report = {
        "schema": REPORT_SCHEMA,
        "artifact_version": __version__,
        "name": cfg.name,
        "method": cfg.method.name,
        "config": cfg.to_dict(),
        "seeds": seeds,
        "per_seed": per_seed,
        "aggregate": aggregate(per_seed),
        "plot_schema": {"version": PLOT_SCHEMA, "columns": PLOT_COLUMNS},
    }
    if out_dir is not None:
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
    return report


# --------------------------------------------------------------------------- compare

def _direction(metric_key: str, alpha: float = 0.1):
    base = metric_key.split("/")[0]
    if base in LOWER_IS_BETTER:
        return lambda v: v
    if base in HIGHER_IS_BETTER:
        return lambda v: -v
    if base == "coverage":
        return lambda v: abs(v - (1.0 - alpha))
    return None


def compare(reports: list[dict]) -> dict:
    """Side-by-side aggregate means with best / second-best flags per metric."""
    if not reports:
        raise ValueError("nothing to compare")
    key_sets = [set(r["aggregate"]) for r in reports]
    shared = sorted(set.intersection(*key_sets))
    if not shared:
        raise ValueError("reports share no metrics")
    labels = [r.get("name") or r.get("method") for r in reports]
    rows = []
    for key in shared:
        alpha = reports[0].get("config", {}).get("conformal_alpha", 0.1)
        vals = [r["aggregate"][key]["mean"] for r in reports]
        stds = [r["aggregate"][key]["std"] for r in reports]
        score = _direction(key, alpha)
        flags = [""] * len(vals)
        if score is not None:
            order = sorted(range(len(vals)), key=lambda i: (score(vals[i]), i))
            flags[order[0]] = "best"
            if len(order) > 1:
                flags[order[1]] = "second"
        rows.append({"metric": key, "values": vals, "stds": stds, "flags": flags})
    return {"columns": labels, "rows": rows}


def format_comparison(table: dict) -> str:
    cols = table["columns"]
    width = max([len("metric")] + [len(r["metric"]) for r in table["rows"]])
    head = "metric".ljust(width) + "".join(f" | {c:>22}" for c in cols)
    lines = [head, "-" * len(head)]
    for r in table["rows"]:
        cells = []
        for v, s, f in zip(r["values"], r["stds"], r["flags"]):
            mark = {"best": "**", "second": "*"}.get(f, "")
            cells.append(f" | {f'{v:.4g} ± {s:.2g}{mark}':>22}")
        lines.append(r["metric"].ljust(width) + "".join(cells))
    return "\n".join(lines)
