import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopbnn import nn
from coopbnn.losses import BetaNLLLoss, GammaNLLLoss, GaussianNLLLoss, MSELoss

from conftest import central_differences, max_relative_error


def count_params(widths):
    total = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        total += fan_in * fan_out + fan_out
    return total


def test_param_count_minimal():
    assert nn.MlpSpec(1).n_params == 2
    assert nn.init_params(nn.MlpSpec(1), 0).shape == (2,)


def test_param_count_two_by_256():
    # 1*256+256 + 256*256+256 + 256*1+1
    spec = nn.mean_spec(1, (256, 256))
    assert spec.n_params == count_params([1, 256, 256, 1]) == 66561
    assert len(nn.init_params(spec, 0)) == 66561


def test_init_deterministic_and_fan_in_scaled():
    spec = nn.mean_spec(3, (8, 8))
    a, b = nn.init_params(spec, 7), nn.init_params(spec, 7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, nn.init_params(spec, 8))
    for W, bias in nn.unpack(spec, a):
        assert np.all(bias == 0)
        assert np.all(np.abs(W) <= 1 / np.sqrt(W.shape[0]))


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec(1, dropout_rate=1.0)
    with pytest.raises(ValueError):
        nn.MlpSpec(1, output_heads=(nn.Head("a"), nn.Head("a")))
    with pytest.raises(ValueError):
        nn.Head("v", link="exp")
    with pytest.raises(ValueError):
        nn.MlpSpec(1, hidden_activation="sigmoid")


def test_zero_weights_identity_and_softplus():
    spec = nn.MlpSpec(2, (3,), (nn.Head("mean"), nn.Head("var", 1, "softplus")))
    out = nn.forward(spec, np.zeros(spec.n_params), np.ones((4, 2)))
    assert np.all(out[:, 0] == 0)
    assert np.allclose(out[:, 1], np.log(2), atol=2e-6)


def naive_forward(spec, params, X):
    layers = nn.unpack(spec, params)
    rows = []
    for x in X:
        h = list(x)
        for k, (W, b) in enumerate(layers):
            z = [sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])]
            h = [float(np.tanh(v)) for v in z] if k < len(layers) - 1 else z
        rows.append(h)
    out = np.array(rows)
    for name, sl in spec.head_slices().items():
        if spec.head(name).link == "softplus":
            out[:, sl] = np.log1p(np.exp(out[:, sl])) + nn.POSITIVE_FLOOR
    return out


def test_forward_matches_naive_evaluation(rng, small_mve):
    params = rng.normal(size=small_mve.n_params)
    X = rng.normal(size=(5, 2))
    assert np.allclose(nn.forward(small_mve, params, X), naive_forward(small_mve, params, X),
                       rtol=1e-12, atol=1e-12)


def test_forward_dimension_mismatch(small_mve):
    with pytest.raises(ValueError):
        nn.forward(small_mve, np.zeros(small_mve.n_params), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        nn.forward(small_mve, np.zeros(3), np.zeros((3, 2)))


def test_mask_rejected_without_dropout(small_mve, rng):
    masks = [np.ones((2, 4)), np.ones((2, 3))]
    with pytest.raises(ValueError):
        nn.forward(small_mve, np.zeros(small_mve.n_params), np.zeros((2, 2)), masks)


def test_mse_gradient_zero_at_perfect_fit(rng, small_mve):
    params = rng.normal(size=small_mve.n_params)
    X = rng.normal(size=(6, 2))
    y = nn.predict_heads(small_mve, params, X)["mean"]
    _, g = nn.grad(small_mve, params, X, y, MSELoss())
    assert np.all(g == 0)


LOSSES = {
    "mse": (MSELoss(), False),
    "gaussian_nll": (GaussianNLLLoss(var_head="var"), False),
    "beta_nll_0": (BetaNLLLoss(0.0), False),
    "gamma_nll": (GammaNLLLoss(), True),
}


def _problem(rng, gamma):
    if gamma:
        spec = nn.gamma_spec(2, (4, 3))
        X = rng.normal(size=(10, 2))
        y = rng.gamma(0.5, 2.0, size=(10, 1)) + 0.05
    else:
        spec = nn.mve_spec(2, (4, 3))
        X = rng.normal(size=(10, 2))
        y = rng.normal(size=(10, 1))
    return spec, X, y


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_gradient_matches_finite_differences(name):
    loss, gamma = LOSSES[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(10):
        spec, X, y = _problem(rng, gamma)
        params = rng.normal(scale=0.7, size=spec.n_params)
        _, g = nn.grad(spec, params, X, y, loss)
        fd = central_differences(lambda p: nn.grad(spec, p, X, y, loss)[0], params)
        assert max_relative_error(g, fd) < 1e-5


def test_gradient_with_dropout_masks_matches_finite_differences(rng):
    spec = nn.mve_spec(2, (5, 4), dropout_rate=0.3)
    X, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 1))
    masks = nn.dropout_masks(spec, 8, rng)
    params = rng.normal(scale=0.5, size=spec.n_params)
    loss = GaussianNLLLoss(var_head="var")
    _, g = nn.grad(spec, params, X, y, loss, masks)
    fd = central_differences(lambda p: nn.grad(spec, p, X, y, loss, masks)[0], params)
    assert max_relative_error(g, fd) < 1e-5


def test_gaussian_nll_variance_gradient_sign():
    # a 0-hidden-layer net whose variance head is softplus(bias): d loss / d bias
    # shares its sign with d loss / d var, which is (var - r) / (2 var^2)
    spec = nn.MlpSpec(1, (), (nn.Head("mean"), nn.Head("var", 1, "softplus")))
    X, y = np.zeros((1, 1)), np.array([[1.0]])     # residual^2 = 1 at mean 0
    for bias, sign in [(3.0, 1.0), (-3.0, -1.0)]:
        params = np.array([0.0, 0.0, 0.0, bias])   # W (1x2), b (2)
        _, g = nn.grad(spec, params, X, y, GaussianNLLLoss(var_head="var"))
        assert np.sign(g[3]) == sign


def test_grad_rejects_missing_head():
    spec = nn.mean_spec(1, (3,))
    with pytest.raises(ValueError):
        nn.grad(spec, np.zeros(spec.n_params), np.zeros((2, 1)), np.zeros((2, 1)),
                GaussianNLLLoss(var_head="var"))


def test_grad_signals_non_finite_loss():
    spec = nn.mean_spec(1, (3,))
    with pytest.raises(FloatingPointError):
        nn.grad(spec, np.zeros(spec.n_params), np.zeros((2, 1)), np.array([[np.inf], [0.0]]), MSELoss())


def test_deterministic_outputs_and_gradients(rng, small_mve):
    params = rng.normal(size=small_mve.n_params)
    X, y = rng.normal(size=(7, 2)), rng.normal(size=(7, 1))
    a = nn.grad(small_mve, params, X, y, GaussianNLLLoss(var_head="var"))
    b = nn.grad(small_mve, params.copy(), X.copy(), y.copy(), GaussianNLLLoss(var_head="var"))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(0.01, 50.0), seed=st.integers(0, 2**31 - 1))
def test_softplus_heads_positive_and_outputs_finite(scale, seed):
    rng = np.random.default_rng(seed)
    spec = nn.MlpSpec(3, (6,), (nn.Head("mean"), nn.Head("var", 2, "softplus")), "relu")
    params = rng.normal(scale=scale, size=spec.n_params)
    out = nn.forward(spec, params, rng.normal(scale=scale, size=(9, 3)))
    assert np.all(np.isfinite(out))
    assert np.all(out[:, 1:] > 0)


def test_inverted_dropout_expectation():
    # a one-hidden-layer net is linear in its dropout mask, so the average over
    # masks should match the mask-free forward within Monte-Carlo error
    rng = np.random.default_rng(5)
    spec = nn.mean_spec(2, (16,), dropout_rate=0.5)
    params = nn.init_params(spec, 3)
    X = rng.normal(size=(4, 2))
    n = 10_000
    draws = np.stack([nn.forward(spec, params, X, nn.dropout_masks(spec, 4, rng)) for _ in range(n)])
    se = draws.std(axis=0) / np.sqrt(n)
    ref = nn.forward(spec.without_dropout(), params, X)
    assert np.all(np.abs(draws.mean(axis=0) - ref) < 3 * se)


def test_dropout_mask_values(rng):
    spec = nn.mean_spec(1, (50,), dropout_rate=0.2)
    (mask,) = nn.dropout_masks(spec, 100, rng)
    assert set(np.unique(mask)) <= {0.0, 1.0 / 0.8}
    with pytest.raises(ValueError):
        nn.dropout_masks(spec.without_dropout(), 3, rng)
