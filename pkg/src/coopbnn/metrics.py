"""Posterior-predictive assembly and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import nn
from .inference import PosteriorEnsemble
from .losses import LOG_2PI, GammaParams, broadcast_rows


@dataclass(frozen=True)
class GaussianPrediction:
    """Moment-matched predictive Gaussian per point; arrays of shape ``(n, dim)``."""

    mean: np.ndarray
    aleatoric_var: np.ndarray
    epistemic_var: np.ndarray

    def __post_init__(self):
        if np.any(self.aleatoric_var < 0) or np.any(self.epistemic_var < 0):
            raise ValueError("variances must be non-negative")

    @property
    def total_var(self) -> np.ndarray:
        return self.aleatoric_var + self.epistemic_var

    def __len__(self):
        return self.mean.shape[0]


def gamma_variance(var_spec: nn.MlpSpec, phi: np.ndarray, X) -> GammaParams:
    heads = nn.predict_heads(var_spec, phi, X)
    return GammaParams(heads["alpha"], heads["lambda"])


def predictive_from_samples(means: np.ndarray, aleatoric) -> GaussianPrediction:
    """Mean and population variance over the leading sample axis of ``means``.

    ``aleatoric`` is either per-sample variances shaped like ``means`` (they
    are averaged) or anything broadcastable to one sample's shape.
    """
    means = np.asarray(means, dtype=float)
    mean = means.mean(axis=0)
    # shifted by the first draw so identical draws give exactly zero
    epistemic = (means - means[0]).var(axis=0)
    aleatoric = np.asarray(aleatoric, dtype=float)
    if aleatoric.shape == means.shape:
        aleatoric = aleatoric.mean(axis=0)
    return GaussianPrediction(mean, broadcast_rows(aleatoric, mean.shape).copy(), epistemic)


def posterior_predictive(ensemble: PosteriorEnsemble, X, fixed_var=None) -> GaussianPrediction:
    """Bayesian model average of an ensemble at inputs ``X``.

    Aleatoric variance comes from, in order: ``fixed_var`` if given, the
    ensemble's frozen Gamma variance network (alpha / lambda), a ``var``
    head averaged over draws, else zero.
    """
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    heads = ensemble.sample_heads(X)
    means = heads["mean"]
    if fixed_var is not None:
        aleatoric = fixed_var
    elif ensemble.aleatoric_params is not None:
        aleatoric = gamma_variance(ensemble.aleatoric_spec, ensemble.aleatoric_params, X).mean
    elif "var" in heads:
        aleatoric = heads["var"]
    else:
        aleatoric = 0.0
    return predictive_from_samples(means, aleatoric)


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _aligned(pred_mean, targets):
    mu, y = _as_2d(pred_mean), _as_2d(targets)
    if mu.shape != y.shape:
        raise ValueError(f"predictions {mu.shape} and targets {y.shape} are misaligned")
    return mu, y


def _mean_of(pred):
    return pred.mean if isinstance(pred, GaussianPrediction) else pred


def rmse(predictions, targets) -> float:
    mu, y = _aligned(_mean_of(predictions), targets)
    return float(np.sqrt(np.mean(np.sum((mu - y) ** 2, axis=1))))


def mae(predictions, targets) -> float:
    mu, y = _aligned(_mean_of(predictions), targets)
    return float(np.mean(np.abs(mu - y)))


def tll(predictions: GaussianPrediction, targets, component: str = "total") -> float:
    """Mean Gaussian log-density of the targets, 2*pi constant included.

    ``component="epistemic"`` scores against the epistemic variance alone.
    """
    mu, y = _aligned(predictions.mean, targets)
    if component == "total":
        var = predictions.total_var
    elif component == "epistemic":
        var = predictions.epistemic_var
    else:
        raise ValueError(f"unknown component {component!r}")
    if np.any(var <= 0):
        raise ValueError("log-likelihood needs strictly positive predictive variance")
    dens = -0.5 * (LOG_2PI + np.log(var)) - (y - mu) ** 2 / (2.0 * var)
    return float(np.mean(np.sum(dens, axis=1)))


def wasserstein(predictions: GaussianPrediction, truth_mean, truth_var, mode: str = "variance") -> float:
    """Per-point distance between predicted and true Gaussians, averaged.

    ``mode="variance"`` combines mean gaps with variance gaps; ``mode="std"``
    uses standard-deviation gaps (the closed-form 2-Wasserstein distance).
    Only the aleatoric variance is compared.
    """
    if truth_mean is None or truth_var is None:
        raise ValueError("Wasserstein distance needs the ground-truth mean and noise variance")
    mu, tm = _aligned(predictions.mean, truth_mean)
    va, tv = _aligned(predictions.aleatoric_var, truth_var)
    if mode == "variance":
        spread = (tv - va) ** 2
    elif mode == "std":
        spread = (np.sqrt(tv) - np.sqrt(va)) ** 2
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.mean(np.sqrt(np.sum((tm - mu) ** 2 + spread, axis=1))))


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    q_hat: float


def gaussian_interval(predictions: GaussianPrediction, alpha: float):
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * np.sqrt(predictions.total_var)
    return predictions.mean - half, predictions.mean + half


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((n + 1)(1 - alpha))-th smallest score (inf if that exceeds n)."""
    scores = np.sort(np.asarray(scores, dtype=float).ravel())
    n = scores.size
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-12)
    return float(scores[k - 1]) if k <= n else math.inf


def conformal_calibrate(val_predictions: GaussianPrediction, val_targets, alpha: float = 0.1) -> ConformalCalibration:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if len(val_predictions) == 0:
        raise ValueError("conformal calibration needs a non-empty validation set")
    lo, hi = gaussian_interval(val_predictions, alpha)
    _, y = _aligned(lo, val_targets)
    scores = np.maximum(lo - y, y - hi)
    return ConformalCalibration(alpha, conformal_quantile(scores, alpha))


def conformal_coverage(cal: ConformalCalibration, test_predictions: GaussianPrediction, test_targets) -> dict:
    lo, hi = gaussian_interval(test_predictions, cal.alpha)
    lo, hi = lo - cal.q_hat, hi + cal.q_hat
    _, y = _aligned(lo, test_targets)
    inside = (y >= lo) & (y <= hi)
    return {"coverage": float(np.mean(inside)), "mean_interval_length": float(np.mean(hi - lo))}
