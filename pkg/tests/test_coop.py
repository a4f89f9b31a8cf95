import math

import numpy as np
import pytest

from coopbnn import coop, nn
from coopbnn.coop import (CoopConfig, CoopIteration, CoopResult, CoopStepError, DegenerateResiduals,
                          aleatoric_variance, coop_train, log_marginal_likelihood, moment_init,
                          select_iteration, train_variance_net)
from coopbnn.data import Dataset, gen_heteroscedastic, standardize
from coopbnn.inference import PosteriorEnsemble, SamplerConfig, TrainConfig
from coopbnn.losses import log_likelihood

LINEAR = nn.MlpSpec(1)
VAR_CFG = TrainConfig(epochs=3000, lr=1e-2, patience=100)


def test_variance_net_recovers_constant_noise():
    rng = np.random.default_rng(0)
    n, eps2 = 2000, 1.5
    x = rng.uniform(-1, 1, n)
    r = rng.gamma(0.5, 2 * eps2, n)          # Gamma(1/2, rate 1/(2 eps^2))
    ds = Dataset(x, np.sqrt(r))               # zero mean, so residuals equal r
    var_spec = nn.gamma_spec(1, (5,))
    phi = train_variance_net(var_spec, ds, np.zeros(n), VAR_CFG)
    assert aleatoric_variance(var_spec, phi, ds.X).mean() == pytest.approx(eps2, rel=0.05)


def test_variance_net_recovers_heteroscedastic_noise_at_true_mean():
    raw = gen_heteroscedastic(500, seed=0)
    sc_train, sc = standardize(raw)
    var_spec = nn.gamma_spec(1, (5,))
    phi = train_variance_net(var_spec, sc_train, sc_train.truth_mean,
                             TrainConfig(epochs=5000, lr=3e-3, patience=300))
    x = np.linspace(0.5, 9.5, 500)[:, None]
    std = np.sqrt(sc.inverse_var(aleatoric_variance(var_spec, phi, sc.transform_x(x))))
    truth = np.sqrt(0.09 * x ** 2 + 0.09)
    assert np.sqrt(np.mean((std - truth) ** 2)) < 0.3


def test_variance_net_single_point_smoke():
    phi = train_variance_net(nn.gamma_spec(1, (5,)), Dataset([0.3], [1.0]), [0.0],
                             TrainConfig(epochs=20, lr=1e-2))
    assert np.all(np.isfinite(phi))


def test_variance_net_rejects_zero_residuals():
    ds = Dataset(np.arange(4.0), np.arange(4.0))
    with pytest.raises(DegenerateResiduals, match="noise floor"):
        train_variance_net(nn.gamma_spec(1, (3,)), ds, np.arange(4.0), VAR_CFG)


def test_variance_net_needs_alpha_lambda_heads():
    with pytest.raises(ValueError):
        coop.check_var_spec(nn.mve_spec(1, (3,)))


def _const(values):
    return PosteriorEnsemble(LINEAR, [np.array([0.0, v]) for v in values], "psgld")


def test_lmglk_single_sample_is_its_log_likelihood():
    ds = Dataset([0.0, 1.0], [0.5, -0.2])
    got = log_marginal_likelihood(_const([0.1]), 0.7, ds)
    assert got == pytest.approx(log_likelihood(np.full((2, 1), 0.1), 0.7, ds.y), rel=1e-14)


def test_lmglk_identical_samples():
    ds = Dataset([0.0, 1.0], [0.5, -0.2])
    one = log_marginal_likelihood(_const([0.1]), 0.7, ds)
    assert log_marginal_likelihood(_const([0.1] * 6), 0.7, ds) == pytest.approx(one, rel=1e-14)


def test_lmglk_three_samples_naive_oracle():
    ds = Dataset([0.0, 1.0], [0.5, -0.2])
    var = 0.7
    vals = []
    for c in (0.1, -0.4, 0.9):
        vals.append(sum(-0.5 * math.log(2 * math.pi * var) - (y - c) ** 2 / (2 * var) for y in (0.5, -0.2)))
    naive = math.log(sum(math.exp(v) for v in vals) / 3)
    assert log_marginal_likelihood(_const([0.1, -0.4, 0.9]), var, ds) == pytest.approx(naive, rel=1e-13)


def test_lmglk_stable_for_large_magnitudes():
    ds = Dataset(np.zeros(1000), np.full(1000, 40.0))
    value = log_marginal_likelihood(_const([0.0, 1.0]), 1.0, ds)
    assert np.isfinite(value)


def test_lmglk_uses_gamma_variance_net():
    ds = Dataset([0.0, 1.0], [0.5, -0.2])
    var_spec = nn.gamma_spec(1, ())
    phi = np.array([0.0, 0.0, 1.0, 0.5])
    var = aleatoric_variance(var_spec, phi, ds.X)
    direct = log_likelihood(np.full((2, 1), 0.1), var, ds.y)
    assert log_marginal_likelihood(_const([0.1]), (var_spec, phi), ds) == pytest.approx(direct, rel=1e-14)


def test_select_iteration_argmax_and_ties():
    assert select_iteration([-5.0, -2.0, -3.0]) == 2
    assert select_iteration([-1.0, -1.0]) == 1
    assert select_iteration([3.0]) == 1
    with pytest.raises(ValueError):
        select_iteration([])


def test_result_selection_from_injected_records():
    recs = [CoopIteration(_const([float(i)]), np.zeros(1), v) for i, v in enumerate([-5.0, -2.0, -3.0])]
    res = CoopResult(np.zeros(2), nn.gamma_spec(1, ()), recs)
    assert res.selected == 2 and res.ensemble is recs[1].ensemble


def test_config_validation():
    with pytest.raises(ValueError):
        CoopConfig(K=0)
    with pytest.raises(ValueError):
        CoopConfig(inference="hmc")


SMALL = CoopConfig(
    K=1, mean_cfg=TrainConfig(epochs=200, lr=1e-2), var_cfg=TrainConfig(epochs=200, lr=1e-2, patience=20),
    bnn_cfg=SamplerConfig(lr=1e-4, burn_in=20, thin=2, n_samples=5))


@pytest.fixture(scope="module")
def tiny_data():
    return standardize(gen_heteroscedastic(80, seed=3))[0]


def test_k1_runs_each_step_once(tiny_data):
    res = coop_train(nn.mean_spec(1, (8,)), tiny_data, SMALL)
    assert len(res.records) == 1 and res.selected == 1
    assert len(res.ensemble) == 5 and res.ensemble.aleatoric_params is res.phi


def test_role_separation_and_no_stale_variance(tiny_data, monkeypatch):
    seen = {}
    real_sampler = coop.sample_psgld
    real_var = coop.train_variance_net

    def spy_var(var_spec, dataset, mean_predictions, cfg, init=None):
        seen.setdefault("phi_init", []).append(None if init is None else init.copy())
        phi = real_var(var_spec, dataset, mean_predictions, cfg, init=init)
        seen.setdefault("phi", []).append(phi.copy())
        return phi

    def spy_sampler(spec, init, dataset, var, prior, cfg):
        seen.setdefault("var", []).append(np.array(var, copy=True))
        seen.setdefault("init", []).append(np.array(init, copy=True))
        return real_sampler(spec, init, dataset, var, prior, cfg)

    monkeypatch.setattr(coop, "train_variance_net", spy_var)
    monkeypatch.setattr(coop, "sample_psgld", spy_sampler)
    from dataclasses import replace
    res = coop_train(nn.mean_spec(1, (8,)), tiny_data, replace(SMALL, K=2))
    for i, rec in enumerate(res.records):
        # Step 3 saw exactly alpha/lambda of this iteration's phi
        expected = aleatoric_variance(res.var_spec, seen["phi"][i], tiny_data.X)
        assert np.array_equal(seen["var"][i], expected)
        # Step 3 did not touch phi; Step 2 did not touch theta
        assert np.array_equal(rec.phi, seen["phi"][i])
        assert np.array_equal(seen["init"][i], res.map_params)
    # the variance net of iteration 2 resumes from iteration 1's phi
    assert seen["phi_init"][0] is None
    assert np.array_equal(seen["phi_init"][1], seen["phi"][0])


def test_step_errors_are_tagged(tiny_data):
    bad = Dataset(tiny_data.X, np.where(np.arange(len(tiny_data))[:, None] == 0, np.nan, tiny_data.y))
    with pytest.raises(CoopStepError) as info:
        coop_train(nn.mean_spec(1, (4,)), bad, SMALL)
    assert info.value.step == 1


def test_mc_dropout_variant_requires_dropout(tiny_data):
    from dataclasses import replace
    with pytest.raises(ValueError):
        coop_train(nn.mean_spec(1, (8,)), tiny_data, replace(SMALL, inference="mc_dropout"))
    res = coop_train(nn.mean_spec(1, (8,), dropout_rate=0.1), tiny_data,
                     replace(SMALL, inference="mc_dropout", mc_passes=7))
    assert res.ensemble.provenance == "mc_dropout" and len(res.ensemble) == 7


def test_bbb_variant_runs(tiny_data):
    from dataclasses import replace
    from coopbnn.inference import BbbConfig
    res = coop_train(nn.mean_spec(1, (8,)), tiny_data,
                     replace(SMALL, inference="bbb", bbb_cfg=BbbConfig(epochs=50, n_samples=6)))
    assert res.ensemble.provenance == "bbb" and len(res.ensemble) == 6


def test_moment_init_starts_at_constant_gamma_fit():
    spec = nn.gamma_spec(1, (5,), output_dim=2)
    r = np.array([[0.1, 4.0], [0.3, 2.0], [0.2, 6.0]])
    params = moment_init(spec, r, seed=3)
    _, b = nn.unpack(spec, params)[-1]
    alpha, rate = nn.softplus(b[:2]), nn.softplus(b[2:])
    assert np.allclose(alpha, 0.5)
    assert np.allclose(alpha / rate, r.mean(axis=0))
    # hidden weights are the ordinary seeded init
    assert np.array_equal(nn.unpack(spec, params)[0][0], nn.unpack(spec, nn.init_params(spec, 3))[0][0])
