"""Update rules: Adam for point estimates, (preconditioned) Langevin for sampling.

Each rule returns new arrays instead of mutating its inputs. All rules
work elementwise, so ``params`` may be any array shape (a batch of
independent chains is just a 2-D array).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float))


def _finite(name, x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {name}")


def adam_step(state: AdamState, params, gradient, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected Adam step. Returns ``(params, state)``."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != np.shape(params):
        raise ValueError("gradient and parameter shapes differ")
    _finite("gradient", gradient)
    t = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * gradient
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * gradient * gradient
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    new = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, AdamState(t, m, v)


def sgld_step(params, grad_log_prior, grad_log_lik_batch, lr: float,
              n_total: int, n_batch: int, rng: np.random.Generator | None):
    """Langevin step on the log posterior with a rescaled minibatch likelihood.

    ``grad_log_lik_batch`` is the gradient of the log-likelihood summed over
    the ``n_batch`` rows of the minibatch. Passing ``rng=None`` drops the
    injected noise.
    """
    if lr <= 0:
        raise ValueError("step size must be positive")
    if not 0 < n_batch <= n_total:
        raise ValueError("need 0 < batch size <= dataset size")
    total = grad_log_prior + (n_total / n_batch) * grad_log_lik_batch
    _finite("gradient", total)
    new = params + 0.5 * lr * total
    if rng is not None:
        new = new + np.sqrt(lr) * rng.standard_normal(np.shape(params))
    return new


@dataclass(frozen=True)
class PsgldConfig:
    lr: float = 1e-3
    smoothing: float = 0.99
    eps: float = 1e-5


@dataclass(frozen=True)
class PsgldState:
    step: int
    square_avg: np.ndarray
    preconditioner: np.ndarray = field(repr=False)

    @classmethod
    def init(cls, params) -> "PsgldState":
        shape = np.shape(params)
        return cls(0, np.zeros(shape), np.ones(shape))


def psgld_step(state: PsgldState, params, grad_log_prior, grad_log_lik_batch,
               n_total: int, n_batch: int, cfg: PsgldConfig, rng: np.random.Generator | None):
    """RMSProp-preconditioned Langevin step. Returns ``(params, state)``.

    G = 1 / (eps + sqrt(v)) with v an EMA of squared total gradients; the
    drift is scaled by G and the injected noise has variance lr * G. The
    term involving derivatives of G is neglected.
    """
    if cfg.lr <= 0:
        raise ValueError("step size must be positive")
    if not 0 < n_batch <= n_total:
        raise ValueError("need 0 < batch size <= dataset size")
    total = grad_log_prior + (n_total / n_batch) * grad_log_lik_batch
    _finite("gradient", total)
    v = cfg.smoothing * state.square_avg + (1.0 - cfg.smoothing) * total * total
    G = 1.0 / (cfg.eps + np.sqrt(v))
    new = params + 0.5 * cfg.lr * G * total
    if rng is not None:
        new = new + np.sqrt(cfg.lr * G) * rng.standard_normal(np.shape(params))
    return new, PsgldState(state.step + 1, v, G)


def constant_schedule(lr: float):
    return lambda step: lr


def polynomial_decay(lr: float, a: float = 1.0, b: float = 1.0, gamma: float = 0.55):
    """Step size ``lr * a * (b + step) ** -gamma``, the classic SGLD schedule."""
    return lambda step: lr * a * (b + step) ** (-gamma)


def with_lr(cfg: PsgldConfig, lr: float) -> PsgldConfig:
    return replace(cfg, lr=lr)
