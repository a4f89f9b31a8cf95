"""Datasets: synthetic generators with known noise, CSV ingestion, scaling, splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    truth_mean: np.ndarray | None = None
    truth_noise_var: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        y = y[:, None] if y.ndim == 1 else y
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if (self.truth_mean is None) != (self.truth_noise_var is None):
            raise ValueError("truth_mean and truth_noise_var must be given together")
        for name in ("truth_mean", "truth_noise_var"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float).reshape(y.shape)
                object.__setattr__(self, name, val)

    def __len__(self):
        return self.X.shape[0]

    @property
    def has_truth(self) -> bool:
        return self.truth_mean is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = (lambda a: None if a is None else a[idx])
        return Dataset(self.X[idx], self.y[idx], pick(self.truth_mean), pick(self.truth_noise_var))


def x_sin_x(x):
    return x * np.sin(x)


def heteroscedastic_noise_var(x):
    return 0.09 * x ** 2 + 0.09


def _synthetic(x, noise_var, rng) -> Dataset:
    x = np.asarray(x, dtype=float)
    f = x_sin_x(x)
    if noise_var is None:
        # two independent standard normals: one scaled by 0.3x, one by 0.3
        e1, e2 = rng.standard_normal(x.shape), rng.standard_normal(x.shape)
        y = f + 0.3 * x * e1 + 0.3 * e2
        var = heteroscedastic_noise_var(x)
    else:
        y = f + np.sqrt(noise_var) * rng.standard_normal(x.shape)
        var = np.full_like(x, noise_var)
    return Dataset(x[:, None], y[:, None], f[:, None], var[:, None])


def gen_heteroscedastic(n: int, x_low: float = 0.0, x_high: float = 10.0, seed: int = 0) -> Dataset:
    """y = x sin x + 0.3 x e1 + 0.3 e2 with x uniform on [x_low, x_high]."""
    _check_range(n, x_low, x_high)
    rng = np.random.default_rng(seed)
    return _synthetic(rng.uniform(x_low, x_high, n), None, rng)


def gen_homoscedastic(n: int, x_low: float = 0.0, x_high: float = 10.0, seed: int = 0) -> Dataset:
    """y = x sin x + 0.5 e2 with x uniform on [x_low, x_high]."""
    _check_range(n, x_low, x_high)
    rng = np.random.default_rng(seed)
    return _synthetic(rng.uniform(x_low, x_high, n), 0.25, rng)


GENERATORS = {"heteroscedastic": gen_heteroscedastic, "homoscedastic": gen_homoscedastic}


def targets_at(kind: str, x, seed: int) -> Dataset:
    """Draw fresh noisy targets from generator ``kind`` at fixed inputs."""
    rng = np.random.default_rng(seed)
    return _synthetic(np.asarray(x, dtype=float).ravel(), None if kind == "heteroscedastic" else 0.25, rng)


def _check_range(n, lo, hi):
    if n < 1:
        raise ValueError("n must be at least 1")
    if not lo < hi:
        raise ValueError("need x_low < x_high")


def synthetic_test_sets(kind: str, n: int = 1000, seed: int = 0) -> dict[str, Dataset]:
    """In-support test points on [0, 10] and extrapolation points on [-4, 0] U [10, 14]."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown generator {kind!r}")
    rng = np.random.default_rng(seed)
    x_in = rng.uniform(0.0, 10.0, n)
    left = rng.uniform(-4.0, 0.0, n // 2)
    right = rng.uniform(10.0, 14.0, n - n // 2)
    x_out = np.concatenate([left, right])
    return {
        "in_support": targets_at(kind, x_in, seed + 1),
        "extrapolation": targets_at(kind, x_out, seed + 2),
    }


class CsvFormatError(ValueError):
    pass


def load_csv(path, target_columns, header: bool = True) -> Dataset:
    """Read a numeric comma-delimited table; ``target_columns`` are names or indices."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    names = None
    if header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise CsvFormatError(f"{path}: header but no data rows")
    width = len(names) if names is not None else len(rows[0])
    data = np.empty((len(rows), width))
    first_line = 2 if header else 1
    for i, row in enumerate(rows):
        line = first_line + i
        if len(row) != width:
            raise CsvFormatError(f"{path}: line {line} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                col = names[j] if names else j
                raise CsvFormatError(
                    f"{path}: line {line}, column {col!r}: non-numeric value {cell!r}") from None
    if isinstance(target_columns, (str, int)):
        target_columns = [target_columns]
    idx = []
    for t in target_columns:
        if isinstance(t, str):
            if names is None or t not in names:
                raise CsvFormatError(f"{path}: no column named {t!r}")
            idx.append(names.index(t))
        else:
            if not -width <= t < width:
                raise CsvFormatError(f"{path}: column index {t} out of range")
            idx.append(t % width)
    features = [j for j in range(width) if j not in idx]
    if not features:
        raise CsvFormatError(f"{path}: no feature columns left after removing targets")
    return Dataset(data[:, features], data[:, idx])


def write_csv(path, dataset: Dataset) -> None:
    cols = ([f"x{j}" for j in range(dataset.X.shape[1])]
            + [f"y{j}" for j in range(dataset.y.shape[1])])
    table = [dataset.X, dataset.y]
    if dataset.has_truth:
        cols += [f"truth_mean{j}" for j in range(dataset.y.shape[1])]
        cols += [f"truth_noise_var{j}" for j in range(dataset.y.shape[1])]
        table += [dataset.truth_mean, dataset.truth_noise_var]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerows(np.hstack(table).tolist())


@dataclass(frozen=True)
class Scaler:
    """Per-column affine maps fit on training rows."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    n_fit: int = 0

    @classmethod
    def fit(cls, ds: Dataset) -> "Scaler":
        def stats(a):
            mu, sd = a.mean(axis=0), a.std(axis=0)
            return mu, np.where(sd > 0, sd, 1.0)
        xm, xs = stats(ds.X)
        ym, ys = stats(ds.y)
        return cls(xm, xs, ym, ys, len(ds))

    def transform_x(self, X):
        return (np.asarray(X, dtype=float).reshape(-1, self.x_mean.size) - self.x_mean) / self.x_std

    def transform(self, ds: Dataset) -> Dataset:
        tm = tv = None
        if ds.has_truth:
            tm = (ds.truth_mean - self.y_mean) / self.y_std
            tv = ds.truth_noise_var / self.y_std ** 2
        return Dataset(self.transform_x(ds.X), (ds.y - self.y_mean) / self.y_std, tm, tv)

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def inverse_var(self, var):
        return np.asarray(var) * self.y_std ** 2

    def inverse(self, ds: Dataset) -> Dataset:
        tm = tv = None
        if ds.has_truth:
            tm, tv = self.inverse_y(ds.truth_mean), self.inverse_var(ds.truth_noise_var)
        return Dataset(ds.X * self.x_std + self.x_mean, self.inverse_y(ds.y), tm, tv)


def standardize(ds: Dataset) -> tuple[Dataset, Scaler]:
    scaler = Scaler.fit(ds)
    return scaler.transform(ds), scaler


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.train_fraction + self.val_fraction > 1 + 1e-12:
            raise ValueError("train and validation fractions exceed 1")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    n_val = min(n_val, n - n_train)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(len(ds), spec)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def with_targets(ds: Dataset, y) -> Dataset:
    return replace(ds, y=np.asarray(y, dtype=float).reshape(ds.y.shape))
