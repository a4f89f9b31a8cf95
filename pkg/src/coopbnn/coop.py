"""Cooperative training of a mean network, a Gamma variance network and a BNN.

Step 1 fits the mean network by MAP under unit noise. Each iteration then
fits the variance network to squared residuals of the current mean (Step 2)
and samples the BNN posterior with that variance held fixed (Step 3). The
iteration with the largest log marginal likelihood is kept.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import nn
from .data import Dataset
from .inference import (BbbConfig, PosteriorEnsemble, SamplerConfig, TrainConfig,
                        mc_dropout_ensemble, sample_psgld, train_bbb, train_map)
from .losses import RESIDUAL_FLOOR, GammaNLLLoss, GaussianNLLLoss, PriorSpec, log_likelihood
from .metrics import gamma_variance, posterior_predictive

log = logging.getLogger(__name__)

INFERENCE_KINDS = ("psgld", "mc_dropout", "bbb")

VAR_TRAIN_DEFAULT = TrainConfig(epochs=5000, lr=1e-3, patience=100, val_fraction=0.2)


class DegenerateResiduals(ValueError):
    pass


class CoopStepError(RuntimeError):
    def __init__(self, step: int, iteration: int | None, cause: Exception):
        where = f"step {step}" if iteration is None else f"step {step}, iteration {iteration}"
        super().__init__(f"{where}: {cause}")
        self.step, self.iteration, self.cause = step, iteration, cause


@dataclass(frozen=True)
class CoopConfig:
    K: int = 2
    mean_cfg: TrainConfig = TrainConfig()
    var_cfg: TrainConfig = VAR_TRAIN_DEFAULT
    bnn_cfg: SamplerConfig = SamplerConfig()
    bbb_cfg: BbbConfig = BbbConfig()
    var_hidden: tuple[int, ...] = (5,)
    inference: str = "psgld"
    prior: PriorSpec = PriorSpec()
    mc_passes: int = 100

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.inference not in INFERENCE_KINDS:
            raise ValueError(f"inference must be one of {INFERENCE_KINDS}")

    def var_spec(self, input_dim: int, output_dim: int = 1) -> nn.MlpSpec:
        return nn.gamma_spec(input_dim, self.var_hidden, output_dim)


def check_var_spec(var_spec: nn.MlpSpec):
    names = {h.name: h for h in var_spec.output_heads}
    if set(names) != {"alpha", "lambda"} or any(h.link != "softplus" for h in names.values()):
        raise ValueError("variance network needs exactly two softplus heads: alpha and lambda")


@dataclass
class CoopIteration:
    ensemble: PosteriorEnsemble
    phi: np.ndarray
    lmglk: float
    seconds: float = 0.0


@dataclass
class CoopResult:
    map_params: np.ndarray
    var_spec: nn.MlpSpec
    records: list[CoopIteration] = field(default_factory=list)

    @property
    def lmglk(self) -> list[float]:
        return [r.lmglk for r in self.records]

    @property
    def selected(self) -> int:
        """1-based index of the chosen iteration."""
        return select_iteration(self.lmglk)

    @property
    def best(self) -> CoopIteration:
        return self.records[self.selected - 1]

    @property
    def ensemble(self) -> PosteriorEnsemble:
        return self.best.ensemble

    @property
    def phi(self) -> np.ndarray:
        return self.best.phi


def select_iteration(lmglk) -> int:
    """1-based argmax; ties go to the earliest iteration."""
    if not len(lmglk):
        raise ValueError("no iterations recorded")
    return int(np.argmax(np.asarray(lmglk, dtype=float))) + 1


def squared_residuals(mean_predictions, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mean_predictions, dtype=float).reshape(y.shape)
    r = (mu - y) ** 2
    if not np.any(r > RESIDUAL_FLOOR):
        raise DegenerateResiduals(
            "all squared residuals are zero: the mean network interpolates the data; "
            "add a noise floor or regularize the mean network")
    return np.maximum(r, RESIDUAL_FLOOR)


def train_variance_net(var_spec: nn.MlpSpec, dataset: Dataset, mean_predictions,
                       cfg: TrainConfig = VAR_TRAIN_DEFAULT, init=None) -> np.ndarray:
    """Fit Gamma shape/rate heads to squared residuals of a fixed mean."""
    check_var_spec(var_spec)
    r = squared_residuals(mean_predictions, dataset.y)
    if init is None:
        init = moment_init(var_spec, r, cfg.seed)
    return train_map(var_spec, Dataset(dataset.X, r), GammaNLLLoss(), cfg, init=init)


def moment_init(var_spec: nn.MlpSpec, r, seed: int) -> np.ndarray:
    """Seeded weights with output biases at the constant Gamma fit.

    Shape 1/2 (a scaled chi-square) and mean equal to the average residual,
    so training starts at the right variance scale instead of alpha/lambda = 1.
    """
    params = nn.init_params(var_spec, seed)
    _, bias = nn.unpack(var_spec, params)[-1]
    alpha = 0.5
    rate = alpha / np.mean(np.asarray(r, dtype=float), axis=0)
    start = 0
    for head in var_spec.output_heads:
        target = alpha if head.name == "alpha" else rate
        bias[start:start + head.dim] = np.log(np.expm1(target))   # inverse softplus
        start += head.dim
    return params


def aleatoric_variance(var_spec: nn.MlpSpec, phi: np.ndarray, X) -> np.ndarray:
    return gamma_variance(var_spec, phi, X).mean


def log_marginal_likelihood(ensemble: PosteriorEnsemble, aleatoric, dataset: Dataset) -> float:
    """log of the average over draws of the full-data Gaussian likelihood.

    ``aleatoric`` is a ``(var_spec, phi)`` pair or a fixed variance
    broadcastable to the targets.
    """
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    if isinstance(aleatoric, tuple):
        var = aleatoric_variance(*aleatoric, dataset.X)
    else:
        var = np.broadcast_to(np.asarray(aleatoric, dtype=float), dataset.y.shape)
    means = ensemble.sample_heads(dataset.X)["mean"]
    per_sample = np.array([log_likelihood(m, var, dataset.y) for m in means])
    if not np.all(np.isfinite(per_sample)):
        raise FloatingPointError("non-finite log-likelihood for some posterior draw")
    return float(logsumexp(per_sample) - np.log(per_sample.size))


def _bnn_step(mean_spec, init, dataset, var, cfg: CoopConfig) -> PosteriorEnsemble:
    if cfg.inference == "psgld":
        return sample_psgld(mean_spec.without_dropout(), init, dataset, var, cfg.prior, cfg.bnn_cfg)
    if cfg.inference == "bbb":
        return train_bbb(mean_spec.without_dropout(), dataset, var, cfg.prior, cfg.bbb_cfg, init=init)
    # dropout at prediction time on the MAP network; no further training
    return mc_dropout_ensemble(mean_spec, init, cfg.mc_passes, seed=cfg.mean_cfg.seed)


def coop_train(mean_spec: nn.MlpSpec, dataset: Dataset, cfg: CoopConfig = CoopConfig(),
               var_spec: nn.MlpSpec | None = None) -> CoopResult:
    if var_spec is None:
        var_spec = cfg.var_spec(mean_spec.input_dim, dataset.y.shape[1])
    check_var_spec(var_spec)
    if cfg.inference == "mc_dropout" and mean_spec.dropout_rate <= 0:
        raise ValueError("MC-Dropout inference needs a mean network with dropout_rate > 0")
    if cfg.inference != "mc_dropout":
        mean_spec = mean_spec.without_dropout()

    try:
        theta_map = train_map(mean_spec, dataset, GaussianNLLLoss(fixed_var=1.0), cfg.mean_cfg)
    except Exception as err:
        raise CoopStepError(1, None, err) from err
    result = CoopResult(theta_map, var_spec)

    # Iterations reuse the same seeds, so they differ only through the mean
    # that feeds the residuals and LMglk compares like with like.
    mean_pred = nn.predict_heads(mean_spec.without_dropout(), theta_map, dataset.X)["mean"]
    phi = None
    for i in range(1, cfg.K + 1):
        t0 = time.perf_counter()
        try:
            # refit from the previous variance parameters, not from scratch
            phi = train_variance_net(var_spec, dataset, mean_pred, cfg.var_cfg, init=phi)
        except Exception as err:
            raise CoopStepError(2, i, err) from err
        var = aleatoric_variance(var_spec, phi, dataset.X)
        try:
            # every chain starts from the MAP mean parameters
            ens = _bnn_step(mean_spec, theta_map, dataset, var, cfg).with_aleatoric(var_spec, phi)
            lml = log_marginal_likelihood(ens, (var_spec, phi), dataset)
        except Exception as err:
            raise CoopStepError(3, i, err) from err
        result.records.append(CoopIteration(ens, phi, lml, time.perf_counter() - t0))
        log.info("iteration %d: LMglk %.3f", i, lml)

        mean_pred = posterior_predictive(ens, dataset.X).mean
    return result
