import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmimo_adv.core import FeatureStats, compute_se, compute_sinr, power_violation
from dmimo_adv.errors import DivergedLoss, ShapeMismatch
from dmimo_adv.nn import (
    ACTIVATIONS,
    MlpModel,
    TrainConfig,
    forward,
    init_mlp,
    input_gradient,
    load_model,
    model_bytes,
    model_digest,
    predict_allocation,
    save_model,
    sum_se_and_grad,
    train,
    training_arrays,
)
from dmimo_adv.scenario import Dataset, NetworkConfig, draw_beta, gen_dataset
from helpers import random_beta, small_model

P, S = 0.2, NetworkConfig().noise_power


def zero_model(m, k, hidden=(5,)):
    model = small_model(m, k, hidden)
    model.weights = [np.zeros_like(w) for w in model.weights]
    model.biases = [np.zeros_like(b) for b in model.biases]
    return model


def test_zero_model_outputs_half_and_has_no_gradient(rng):
    model = zero_model(4, 2)
    x = rng.normal(size=(3, 8))
    np.testing.assert_array_equal(forward(model, x), 0.5)
    _, grad = input_gradient(model, x, random_beta(rng, (3, 4, 2)), P, S)
    np.testing.assert_array_equal(grad, 0.0)


def test_forward_deterministic_and_shape_checked(rng):
    model = small_model(4, 2)
    x = rng.normal(size=(2, 8))
    np.testing.assert_array_equal(forward(model, x), forward(model, x.copy()))
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((2, 7)))


@given(arrays(np.float64, (4, 8), elements=st.floats(-1e3, 1e3)))
def test_output_bounded(x):
    out = forward(small_model(4, 2, seed=3), x)
    assert np.all((out >= 0) & (out <= 1))


@pytest.mark.parametrize("name", ["silu", "softplus", "sigmoid", "tanh"])
def test_activation_derivatives(name):
    fn, deriv = ACTIVATIONS[name]
    z = np.linspace(-30, 30, 601)
    h = 1e-6
    fd = (fn(z + h) - fn(z - h)) / (2 * h)
    np.testing.assert_allclose(deriv(z, fn(z)), fd, atol=1e-8)


def _sum_se(model, x, beta_belief):
    m, k = beta_belief.shape[-2:]
    nu = forward(model, x).reshape(-1, m, k)
    eta = nu / beta_belief
    return compute_se(compute_sinr(beta_belief, eta, P, S)).sum(axis=-1)


def test_input_gradient_matches_central_differences():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        m, k = [(4, 2), (9, 3), (16, 4)][trial % 3]
        model = small_model(m, k, hidden=(12, 7), seed=trial)
        for w in model.weights:
            w *= rng.uniform(0.5, 2.0)
        x = rng.normal(size=(1, m * k))
        belief = random_beta(rng, (1, m, k), -110, -70)
        j, grad = input_gradient(model, x, belief, P, S)
        assert j[0] == pytest.approx(_sum_se(model, x, belief)[0], rel=1e-12)
        h = 1e-5
        fd = np.empty(m * k)
        for i in range(m * k):
            e = np.zeros_like(x)
            e[0, i] = h
            fd[i] = (_sum_se(model, x + e, belief)[0] - _sum_se(model, x - e, belief)[0]) / (2 * h)
        worst = max(worst, np.abs(grad[0] - fd).max() / np.abs(fd).max())
    assert worst < 1e-4


def test_input_gradient_hand_chain_rule_linear_network():
    model = MlpModel(
        widths=[1, 1, 1],
        weights=[np.array([[0.3]]), np.array([[0.5]])],
        biases=[np.array([0.2]), np.array([0.4])],
        hidden_activation="linear",
        output_activation="linear",
        feature_stats=FeatureStats(np.array([0.0]), np.array([1.0])),
        grid=(1, 1),
    )
    x, beta, p, s = 0.7, 2.0, 1.5, 0.5
    nu = 0.5 * (0.3 * x + 0.2) + 0.4
    g = p * beta / s
    sinr = nu * g / (nu * g + 1)
    d_sinr = g / (nu * g + 1) ** 2
    expected = d_sinr / ((1 + sinr) * math.log(2)) * 0.5 * 0.3
    j, grad = input_gradient(model, np.array([[x]]), np.array([[[beta]]]), p, s)
    assert j[0] == pytest.approx(math.log2(1 + sinr), rel=1e-14)
    assert grad[0, 0] == pytest.approx(expected, rel=1e-12)


def test_sum_se_gradient_finite_differences(rng):
    nu = rng.uniform(0.05, 0.5, (4, 3))
    g = 10 ** rng.uniform(0, 3, (4, 3))
    j, grad = sum_se_and_grad(nu, g)
    h = 1e-7
    for idx in np.ndindex(nu.shape):
        e = np.zeros_like(nu)
        e[idx] = h
        fd = (sum_se_and_grad(nu + e, g)[0] - sum_se_and_grad(nu - e, g)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-6)


def _tiny_dataset(n=10, seed=0):
    cfg = NetworkConfig(num_rus=4, num_ues=2, master_seed=seed)
    return gen_dataset(cfg, n, train_fraction=1.0)


def test_memorizes_ten_samples():
    ds = _tiny_dataset(10)
    model = init_mlp(8, [64, 64], 8, seed=0)
    model, hist = train(model, ds, TrainConfig(epochs=3000, patience=3000, learning_rate=3e-3, val_fraction=0.0))
    x, y = training_arrays(*ds.train, ds.feature_stats)
    assert float(np.mean((forward(model, x) - y) ** 2)) < 1e-4


def test_training_deterministic_and_beats_constant():
    ds = gen_dataset(NetworkConfig(num_rus=4, num_ues=2), 600, train_fraction=0.8)
    cfg = TrainConfig(epochs=40, seed=3)
    a, ha = train(init_mlp(8, [32, 16], 8, seed=3), ds, cfg)
    b, _ = train(init_mlp(8, [32, 16], 8, seed=3), ds, cfg)
    assert model_bytes(a) == model_bytes(b)
    x_tr, y_tr = training_arrays(*ds.train, ds.feature_stats)
    x_te, y_te = training_arrays(*ds.test, ds.feature_stats)
    constant = float(np.mean((y_te - y_tr.mean(axis=0)) ** 2))
    assert float(np.mean((forward(a, x_te) - y_te) ** 2)) < constant
    assert ha["val_loss"][ha["best_epoch"]] == min(ha["val_loss"])
    assert a.grid == (4, 2) and a.fingerprint["best_epoch"] == ha["best_epoch"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_loss_raises():
    ds = _tiny_dataset(20)
    model = init_mlp(8, [4], 8, seed=0)
    model.weights[0][0, 0] = np.nan
    with pytest.raises(DivergedLoss):
        train(model, ds, TrainConfig(epochs=2))


def test_predict_allocation_feasible_for_reported_beta(rng):
    model = small_model(4, 2, seed=1)
    model.biases[-1][:] = 3.0
    beta = random_beta(rng, (50, 4, 2), -110, -70)
    eta = predict_allocation(model, beta)
    assert power_violation(beta, eta).max() <= 1 + 1e-12


def test_reported_and_true_channels_differ_in_outcome():
    cfg = NetworkConfig()
    beta = draw_beta(cfg, 0)
    model = small_model(16, 4, hidden=(16,), seed=4)
    model.hidden_activation = "softplus"
    reported = beta * np.where(np.arange(64).reshape(16, 4) % 3 == 0, 10 ** 0.8, 1.0)
    eta = predict_allocation(model, reported)
    believed = compute_se(compute_sinr(reported, eta, cfg.total_power, cfg.noise_power)).sum()
    actual = compute_se(compute_sinr(beta, eta, cfg.total_power, cfg.noise_power)).sum()
    # frozen instance: the CP's belief overstates what the users actually get
    assert believed == pytest.approx(3.201984865517887, rel=1e-9)
    assert actual == pytest.approx(2.9126983083385256, rel=1e-9)
    assert power_violation(reported, eta).max() <= 1 + 1e-12


def test_model_file_round_trip(tmp_path):
    model = small_model(4, 2, seed=2)
    path = tmp_path / "m.model"
    save_model(model, path)
    back = load_model(path)
    assert model_digest(back) == model_digest(model)
    x = np.random.default_rng(0).normal(size=(3, 8))
    np.testing.assert_array_equal(forward(back, x), forward(model, x))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ShapeMismatch):
        load_model(path)


def test_dataset_type_used_for_training_has_stats():
    ds = _tiny_dataset(5)
    assert isinstance(ds, Dataset)
    assert ds.feature_stats.mean.shape == (8,)
