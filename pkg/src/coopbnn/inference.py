"""Training and posterior-approximation procedures built on nn/losses/optim."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import nn
from .data import Dataset
from .losses import GaussianNLLLoss, PriorSpec
from .optim import AdamConfig, AdamState, PsgldConfig, PsgldState, adam_step, psgld_step

log = logging.getLogger(__name__)

PROVENANCES = ("psgld", "mc_dropout", "bbb", "ensemble", "map")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Adam training settings.

    ``prior_precision`` adds the Gaussian log-prior as L2 regularization,
    divided by the number of training rows to match a per-point mean loss.
    Early stopping is active when ``patience`` is set: a ``val_fraction``
    share of rows is held out and the best validation iterate is returned.
    """

    epochs: int = 20000
    lr: float = 1e-3
    batch_size: int | None = None
    prior_precision: float | None = 1.0
    patience: int | None = None
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    lr: float = 1e-4
    burn_in: int = 10000
    thin: int = 100
    n_samples: int = 100
    batch_size: int | None = None
    smoothing: float = 0.99
    eps: float = 1e-5
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.burn_in + self.thin * self.n_samples


@dataclass(frozen=True)
class BbbConfig:
    epochs: int = 10000
    lr: float = 1e-2
    n_samples: int = 100
    batch_size: int | None = None
    init_std: float = 0.05
    seed: int = 0


@dataclass
class PosteriorEnsemble:
    """Parameter draws for Bayesian model averaging.

    For ``mc_dropout`` the single stored parameter vector is evaluated under
    ``n_passes`` random dropout masks instead of being a set of draws.
    The aleatoric fields hold a frozen Gamma variance network when the
    ensemble came out of cooperative training.
    """

    spec: nn.MlpSpec
    samples: list
    provenance: str
    aleatoric_spec: nn.MlpSpec | None = None
    aleatoric_params: np.ndarray | None = None
    n_passes: int = 0
    dropout_seed: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.samples):
            raise ValueError("ensemble needs at least one sample")
        m = self.spec.n_params
        if any(np.shape(s) != (m,) for s in self.samples):
            raise ValueError(f"every sample must have {m} parameters")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "mc_dropout" and self.n_passes < 1:
            raise ValueError("mc_dropout ensembles need n_passes >= 1")

    def __len__(self):
        return self.n_passes if self.provenance == "mc_dropout" else len(self.samples)

    def sample_heads(self, X) -> dict[str, np.ndarray]:
        """Head outputs for every draw, each of shape ``(S, n_rows, dim)``."""
        if self.provenance == "mc_dropout":
            return predict_mc_dropout(self.spec, self.samples[0], X, self.n_passes, self.dropout_seed)
        spec = self.spec.without_dropout()
        outs = np.stack([nn.forward(spec, s, X) for s in self.samples])
        return nn.split_heads(spec, outs)

    def with_aleatoric(self, var_spec: nn.MlpSpec, phi: np.ndarray) -> "PosteriorEnsemble":
        return replace(self, aleatoric_spec=var_spec, aleatoric_params=np.asarray(phi))


def _batches(n: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        yield slice(None)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _holdout(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        return np.sort(perm), None
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_map(spec: nn.MlpSpec, dataset: Dataset, loss, cfg: TrainConfig = TrainConfig(),
              init: np.ndarray | None = None, history: list | None = None) -> np.ndarray:
    """Adam-minimize ``loss`` (+ optional Gaussian prior) over the network parameters.

    Dropout, when the spec has it, is active on every training step.
    Raises :class:`TrainingDiverged` on a non-finite loss or gradient.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    X, y = dataset.X, dataset.y
    train_idx, val_idx = (np.arange(len(dataset)), None)
    if cfg.patience is not None:
        train_idx, val_idx = _holdout(len(dataset), cfg.val_fraction, cfg.seed)
    Xt, yt = X[train_idx], y[train_idx]
    n = len(train_idx)

    rng = np.random.default_rng(cfg.seed)
    params = nn.init_params(spec, cfg.seed) if init is None else np.array(init, dtype=float)
    state = AdamState.zeros_like(params)
    adam = AdamConfig(lr=cfg.lr)
    decay = 0.0 if cfg.prior_precision is None else cfg.prior_precision / n
    eval_spec = spec.without_dropout()

    best, best_val, since_best = params, np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(n, cfg.batch_size, rng):
            xb, yb = Xt[idx], yt[idx]
            masks = nn.dropout_masks(spec, xb.shape[0], rng) if spec.dropout_rate > 0 else None
            try:
                value, g = nn.grad(spec, params, xb, yb, loss, masks)
                if decay:
                    g = g + decay * params
                params, state = adam_step(state, params, g, adam)
            except (FloatingPointError, ValueError) as err:
                raise TrainingDiverged(f"training diverged: {err}", epoch) from err
        if history is not None:
            history.append(value)
        if val_idx is not None:
            val = loss(nn.predict_heads(eval_spec, params, X[val_idx]), y[val_idx])[0]
            if val < best_val:
                best, best_val, since_best = params, val, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    log.debug("early stop at epoch %d (best val %.4g)", epoch, best_val)
                    break
    return best if val_idx is not None else params


def _langevin(spec, init, dataset: Dataset, loss_for, prior: PriorSpec, cfg: SamplerConfig):
    """Run pSGLD; ``loss_for(batch_index)`` gives the summed NLL for that batch."""
    X, y = dataset.X, dataset.y
    n = len(dataset)
    rng = np.random.default_rng(cfg.seed)
    params = np.array(init, dtype=float)
    state = PsgldState.init(params)
    step_cfg = PsgldConfig(cfg.lr, cfg.smoothing, cfg.eps)
    samples = []
    for epoch in range(1, cfg.total_epochs + 1):
        for idx in _batches(n, cfg.batch_size, rng):
            xb, yb = X[idx], y[idx]
            try:
                _, g = nn.grad(spec, params, xb, yb, loss_for(idx))
                params, state = psgld_step(state, params, prior.grad_log_prob(params), -g,
                                           n, xb.shape[0], step_cfg, rng)
            except (FloatingPointError, ValueError) as err:
                raise TrainingDiverged(f"sampler diverged: {err}", epoch) from err
        if epoch > cfg.burn_in and (epoch - cfg.burn_in) % cfg.thin == 0:
            samples.append(params.copy())
    return samples


def sample_psgld(spec: nn.MlpSpec, init: np.ndarray, dataset: Dataset, aleatoric_var,
                 prior: PriorSpec = PriorSpec(), cfg: SamplerConfig = SamplerConfig()) -> PosteriorEnsemble:
    """pSGLD draws from the posterior of a mean network with fixed per-point noise.

    ``aleatoric_var`` is a scalar or one variance per training row (or a
    block matching ``dataset.y``); it is held fixed while sampling.
    """
    if cfg.n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    var = np.asarray(aleatoric_var, dtype=float)
    if var.ndim >= 1 and var.shape[0] != len(dataset):
        raise ValueError("aleatoric_var must have one entry per training row")
    if np.any(var <= 0):
        raise ValueError("aleatoric variance must be positive")

    def batch_loss(idx):
        return GaussianNLLLoss(fixed_var=var if var.ndim == 0 else var[idx], reduction="sum")

    samples = _langevin(spec, init, dataset, batch_loss, prior, cfg)
    return PosteriorEnsemble(spec, samples, "psgld", info={"sampler": cfg})


def sample_end_to_end(spec: nn.MlpSpec, init: np.ndarray, dataset: Dataset,
                      prior: PriorSpec = PriorSpec(), cfg: SamplerConfig = SamplerConfig()) -> PosteriorEnsemble:
    """pSGLD on a mean+variance network's full heteroscedastic likelihood."""
    loss = GaussianNLLLoss(var_head="var", reduction="sum")
    samples = _langevin(spec, init, dataset, lambda idx: loss, prior, cfg)
    return PosteriorEnsemble(spec, samples, "psgld", info={"sampler": cfg, "end_to_end": True})


@dataclass(frozen=True)
class VariationalParams:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.rho):
            raise ValueError("mu and rho must have the same length")

    @property
    def sigma(self):
        return nn.softplus(self.rho)


def inverse_softplus(s):
    s = np.asarray(s, dtype=float)
    return s + np.log(-np.expm1(-s))


def gaussian_kl(q: VariationalParams, prior: PriorSpec) -> float:
    """KL(q || N(0, 1/kappa I)) for a mean-field Gaussian q."""
    sig2 = q.sigma ** 2
    k = prior.kappa
    return float(np.sum(-0.5 * np.log(k * sig2) + 0.5 * k * (sig2 + q.mu ** 2) - 0.5))


def train_bbb(spec: nn.MlpSpec, dataset: Dataset, aleatoric_var, prior: PriorSpec = PriorSpec(),
              cfg: BbbConfig = BbbConfig(), init: np.ndarray | None = None,
              likelihood_scale: float = 1.0, history: list | None = None) -> PosteriorEnsemble:
    """Bayes by Backprop: mean-field Gaussian fit by Adam on the negative ELBO.

    One reparameterized draw per step, KL in closed form. The objective is
    divided by the number of rows. ``likelihood_scale`` multiplies the data
    term (0 leaves only the KL, so q relaxes to the prior).
    """
    X, y = dataset.X, dataset.y
    n = len(dataset)
    var = np.asarray(aleatoric_var, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    mu = nn.init_params(spec, cfg.seed) if init is None else np.array(init, dtype=float)
    rho = np.full_like(mu, float(inverse_softplus(cfg.init_std)))
    st_mu, st_rho = AdamState.zeros_like(mu), AdamState.zeros_like(rho)
    adam = AdamConfig(lr=cfg.lr)
    k = prior.kappa

    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(n, cfg.batch_size, rng):
            xb, yb = X[idx], y[idx]
            sigma = nn.softplus(rho)
            eps = rng.standard_normal(mu.shape)
            theta = mu + sigma * eps
            try:
                data_val, g = 0.0, np.zeros_like(mu)
                if likelihood_scale:
                    fixed = var if var.ndim == 0 else var[idx]
                    data_val, g = nn.grad(spec, theta, xb, yb,
                                          GaussianNLLLoss(fixed_var=fixed, reduction="sum"))
                    g = g * (likelihood_scale * n / xb.shape[0])
                g_mu = (g + k * mu) / n
                g_sigma = g * eps + (k * sigma - 1.0 / sigma)
                g_rho = g_sigma * expit(rho) / n
                mu, st_mu = adam_step(st_mu, mu, g_mu, adam)
                rho, st_rho = adam_step(st_rho, rho, g_rho, adam)
            except (FloatingPointError, ValueError) as err:
                raise TrainingDiverged(f"variational training diverged: {err}", epoch) from err
        if history is not None:
            history.append((likelihood_scale * data_val * n / xb.shape[0]
                            + gaussian_kl(VariationalParams(mu, rho), prior)) / n)

    q = VariationalParams(mu, rho)
    draws = [mu + q.sigma * rng.standard_normal(mu.shape) for _ in range(cfg.n_samples)]
    return PosteriorEnsemble(spec, draws, "bbb", info={"variational": q, "kl": gaussian_kl(q, prior)})


def predict_mc_dropout(spec: nn.MlpSpec, params: np.ndarray, X, n_passes: int,
                       seed: int) -> dict[str, np.ndarray]:
    """Stochastic forwards with dropout left on; each head stacked to ``(n_passes, n, dim)``."""
    if spec.dropout_rate <= 0:
        raise ValueError("MC-Dropout prediction needs dropout_rate > 0")
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    outs = np.stack([nn.forward(spec, params, X, nn.dropout_masks(spec, n, rng))
                     for _ in range(n_passes)])
    return nn.split_heads(spec, outs)


def mc_dropout_ensemble(spec: nn.MlpSpec, params: np.ndarray, n_passes: int = 100,
                        seed: int = 0) -> PosteriorEnsemble:
    return PosteriorEnsemble(spec, [np.asarray(params)], "mc_dropout",
                             n_passes=n_passes, dropout_seed=seed)


def train_ensemble(spec: nn.MlpSpec, dataset: Dataset, loss, n_members: int = 5,
                   seeds=None, cfg: TrainConfig = TrainConfig()) -> PosteriorEnsemble:
    """Independent MAP fits from different seeds, kept as equally weighted members."""
    if n_members < 1:
        raise ValueError("n_members must be at least 1")
    seeds = list(range(cfg.seed, cfg.seed + n_members)) if seeds is None else list(seeds)
    if len(seeds) != n_members:
        raise ValueError("need one seed per member")
    members, failures = [], {}
    for s in seeds:
        try:
            members.append(train_map(spec, dataset, loss, replace(cfg, seed=s)))
        except TrainingDiverged as err:
            failures[s] = str(err)
            log.warning("ensemble member with seed %d diverged: %s", s, err)
    if not members:
        raise TrainingDiverged(f"all ensemble members diverged: {failures}")
    return PosteriorEnsemble(spec, members, "ensemble", info={"failures": failures, "seeds": seeds})
