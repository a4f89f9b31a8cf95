"""Training objectives.

The elementwise functions (``gaussian_nll``, ``beta_nll``, ``gamma_nll``)
evaluate per-point values and accept scalars or arrays. The loss classes
wrap them for :func:`coopbnn.nn.grad`: calling one on a dict of head
outputs returns the reduced value and the derivative w.r.t. each head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from . import nn

LOG_2PI = float(np.log(2.0 * np.pi))

# Squared residuals are floored here before entering the Gamma likelihood.
RESIDUAL_FLOOR = 1e-8


@dataclass(frozen=True)
class GammaParams:
    alpha: np.ndarray
    rate: np.ndarray

    @property
    def mean(self):
        """Expected squared residual, i.e. the aleatoric variance."""
        return self.alpha / self.rate


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic zero-mean Gaussian prior with precision ``kappa``."""

    kappa: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("prior precision must be positive")

    def log_prob(self, params: np.ndarray) -> float:
        m = params.size
        return 0.5 * m * (np.log(self.kappa) - LOG_2PI) - 0.5 * self.kappa * float(params @ params)

    def grad_log_prob(self, params: np.ndarray) -> np.ndarray:
        return -self.kappa * params


def _positive(name, x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError(f"{name} must be strictly positive")
    return x


def gaussian_nll(mean, var, y):
    """(y - mean)^2 / (2 var) + log(var) / 2, elementwise; no 2*pi constant."""
    var = _positive("variance", var)
    return (np.asarray(y) - mean) ** 2 / (2.0 * var) + 0.5 * np.log(var)


def beta_nll(mean, var, y, beta):
    """Gaussian NLL weighted by var**beta (the weight carries no gradient)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    var = _positive("variance", var)
    return var ** beta * gaussian_nll(mean, var, y)


def gamma_nll(alpha, rate, r):
    """Negative log-density of Gamma(shape=alpha, rate) at r, elementwise."""
    alpha = _positive("alpha", alpha)
    rate = _positive("rate", rate)
    r = _positive("residual", r)
    return -alpha * np.log(rate) + gammaln(alpha) - (alpha - 1.0) * np.log(r) + rate * r


def mse(mean, y) -> float:
    return float(np.mean((np.asarray(mean, dtype=float) - np.asarray(y, dtype=float)) ** 2))


def broadcast_rows(values, shape) -> np.ndarray:
    """Broadcast a scalar, per-row vector, or full block to ``shape``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1 and len(shape) == 2 and values.shape[0] == shape[0]:
        values = values[:, None]
    return np.broadcast_to(values, shape)


def _reduce(per_point: np.ndarray, reduction: str):
    """Sum over output dims, then mean or sum over rows; also the row scale."""
    per_row = per_point.reshape(per_point.shape[0], -1).sum(axis=1)
    if reduction == "mean":
        return per_row.mean(), 1.0 / per_point.shape[0]
    if reduction == "sum":
        return per_row.sum(), 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class MSELoss:
    mean_head: str = "mean"

    @property
    def heads(self):
        return (self.mean_head,)

    def __call__(self, heads, y):
        mu = heads[self.mean_head]
        diff = mu - y.reshape(mu.shape)
        return float(np.mean(diff ** 2)), {self.mean_head: 2.0 * diff / diff.size}


@dataclass(frozen=True)
class GaussianNLLLoss:
    """Gaussian NLL with either a learned variance head or a fixed variance.

    ``fixed_var`` may be a scalar or an array aligned with the rows passed
    in; it is ignored when ``var_head`` is set.
    """

    mean_head: str = "mean"
    var_head: str | None = None
    fixed_var: float | np.ndarray = 1.0
    reduction: str = "mean"

    @property
    def heads(self):
        return (self.mean_head,) if self.var_head is None else (self.mean_head, self.var_head)

    def __call__(self, heads, y):
        mu = heads[self.mean_head]
        y = y.reshape(mu.shape)
        if self.var_head is None:
            var = broadcast_rows(self.fixed_var, mu.shape)
        else:
            var = heads[self.var_head]
        value, scale = _reduce(gaussian_nll(mu, var, y), self.reduction)
        diff = mu - y
        grads = {self.mean_head: scale * diff / var}
        if self.var_head is not None:
            grads[self.var_head] = scale * (var - diff ** 2) / (2.0 * var ** 2)
        return float(value), grads


@dataclass(frozen=True)
class BetaNLLLoss:
    beta: float = 0.5
    mean_head: str = "mean"
    var_head: str = "var"
    reduction: str = "mean"

    @property
    def heads(self):
        return (self.mean_head, self.var_head)

    def __call__(self, heads, y):
        mu, var = heads[self.mean_head], heads[self.var_head]
        y = y.reshape(mu.shape)
        value, scale = _reduce(beta_nll(mu, var, y, self.beta), self.reduction)
        weight = var ** self.beta
        diff = mu - y
        return float(value), {
            self.mean_head: scale * weight * diff / var,
            self.var_head: scale * weight * (var - diff ** 2) / (2.0 * var ** 2),
        }


@dataclass(frozen=True)
class GammaNLLLoss:
    """Gamma NLL of squared residuals; the target passed in is ``r``."""

    alpha_head: str = "alpha"
    rate_head: str = "lambda"
    reduction: str = "mean"

    @property
    def heads(self):
        return (self.alpha_head, self.rate_head)

    def __call__(self, heads, r):
        alpha, rate = heads[self.alpha_head], heads[self.rate_head]
        r = r.reshape(alpha.shape)
        value, scale = _reduce(gamma_nll(alpha, rate, r), self.reduction)
        return float(value), {
            self.alpha_head: scale * (digamma(alpha) - np.log(rate) - np.log(r)),
            self.rate_head: scale * (r - alpha / rate),
        }


def log_likelihood(mean, var, y) -> float:
    """Full Gaussian log-likelihood summed over every entry."""
    var = _positive("variance", var)
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - (np.asarray(y) - mean) ** 2 / (2.0 * var)))


def log_posterior(spec: nn.MlpSpec, params, X, y, aleatoric_var, prior: PriorSpec = PriorSpec()) -> float:
    """Unnormalized log posterior of a mean network under fixed per-point noise."""
    mu = nn.predict_heads(spec, params, X)["mean"]
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != mu.shape:
        raise ValueError(f"targets shape {y.shape} does not match predictions {mu.shape}")
    var = broadcast_rows(aleatoric_var, mu.shape)
    return log_likelihood(mu, var, y) + prior.log_prob(np.asarray(params))
