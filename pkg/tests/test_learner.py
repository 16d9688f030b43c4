import logging
import math

import numpy as np
import pytest

from learner import (AdamState, MlpParams, TrainConfig, TrainingError, adam_step, backprop, depth_sweep, forward,
                     init_params, load_model, loss, predict, save_model, train)


def zero_params(task: str) -> MlpParams:
    acts = ('relu', 'linear') if task == 'regression' else ('sigmoid', 'sigmoid')
    return MlpParams((np.zeros((3, 4)), np.zeros((4, 2))), (np.zeros(4), np.zeros(2)), acts)


def scalar_params(w: float, b: float) -> MlpParams:
    return MlpParams((np.array([[w]]),), (np.array([b]),), ('linear',))


def test_zero_network_outputs():
    x = np.array([1.0, -2.0, 3.0])
    assert forward(zero_params('regression'), x).tolist() == [0.0, 0.0]
    assert forward(zero_params('classification'), x).tolist() == [0.5, 0.5]


def test_identity_layer():
    params = MlpParams((np.eye(3),), (np.zeros(3),), ('linear',))
    x = np.array([[0.5, -1.0, 2.0], [1.0, 2.0, 3.0]])
    assert np.array_equal(forward(params, x), x)


def test_forward_checks_width():
    with pytest.raises(ValueError, match='input width'):
        forward(zero_params('regression'), np.ones(4))


def test_loss_examples():
    assert loss('regression', [[2.0], [3.0]], [[1.0], [3.0]]) == pytest.approx(0.5)
    assert loss('regression', [[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert loss('classification', [[0.5]], [[1.0]]) == pytest.approx(math.log(2))


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss('regression', np.zeros((2, 1)), np.zeros((1, 2)))


def numeric_gradient(params: MlpParams, X, Y, task: str, h: float = 1e-6) -> list[np.ndarray]:
    arrays = [a.copy() for a in params.arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            keep = a[idx]
            a[idx] = keep + h
            up = loss(task, forward(params.with_arrays(arrays), X), Y)
            a[idx] = keep - h
            down = loss(task, forward(params.with_arrays(arrays), X), Y)
            a[idx] = keep
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize('task', ['regression', 'classification'])
def test_backprop_matches_finite_differences(task):
    rng = np.random.default_rng(5)
    for _ in range(10):
        params = init_params((4, 2, 3), task, rng)
        X = rng.normal(size=(6, 4))
        Y = rng.normal(size=(6, 3)) if task == 'regression' else rng.integers(0, 2, size=(6, 3)).astype(float)
        analytic = backprop(params, X, Y, task).arrays
        for a, n in zip(analytic, numeric_gradient(params, X, Y, task)):
            np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)


def test_zero_error_gives_zero_gradient():
    rng = np.random.default_rng(0)
    params = init_params((4, 5, 2), 'regression', rng)
    X = rng.normal(size=(8, 4))
    grads = backprop(params, X, forward(params, X), 'regression')
    assert all(np.allclose(g, 0.0) for g in grads.arrays)


def test_duplicated_sample_has_same_gradient():
    rng = np.random.default_rng(1)
    params = init_params((4, 2, 3), 'classification', rng)
    X = rng.normal(size=(1, 4))
    Y = np.array([[1.0, 0.0, 1.0]])
    single = backprop(params, X, Y, 'classification')
    double = backprop(params, np.vstack([X, X]), np.vstack([Y, Y]), 'classification')
    for a, b in zip(single.arrays, double.arrays):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match='empty'):
        backprop(zero_params('regression'), np.zeros((0, 3)), np.zeros((0, 2)), 'regression')


def test_adam_zero_gradient_leaves_params():
    params = scalar_params(0.3, -0.2)
    new, state = adam_step(params, scalar_params(0.0, 0.0), AdamState.zeros_like(params), TrainConfig())
    assert new.weights[0][0, 0] == 0.3 and new.biases[0][0] == -0.2
    assert state.t == 1


def test_adam_first_step_is_learning_rate():
    params = scalar_params(0.0, 0.0)
    new, _ = adam_step(params, scalar_params(1.0, -1.0), AdamState.zeros_like(params), TrainConfig(lr=1e-3))
    assert new.weights[0][0, 0] == pytest.approx(-1e-3, abs=1e-9)
    assert new.biases[0][0] == pytest.approx(-new.weights[0][0, 0])


def test_init_is_seeded():
    a = init_params((5, 8, 2), 'regression', np.random.default_rng(4))
    b = init_params((5, 8, 2), 'regression', np.random.default_rng(4))
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))
    assert a.activations == ('relu', 'linear')
    assert np.all(np.abs(a.weights[0]) <= np.sqrt(6.0 / 5))


def linear_data(n: int = 200):
    X = np.random.default_rng(9).uniform(-1, 1, size=(n, 1))
    return X, 2 * X


def test_learns_linear_target():
    X, Y = linear_data()
    cfg = TrainConfig(task='regression', hidden_width=16, epochs=500, batch_size=32, seed=0)
    model = train(X, Y, cfg)
    assert model.report.val_loss[-1] <= 1e-3
    assert len(model.report.train_loss) == 500
    assert predict(model, np.array([[0.5]]))[0, 0] == pytest.approx(1.0, abs=0.1)


def test_same_seed_is_bit_identical():
    X, Y = linear_data(60)
    cfg = TrainConfig(task='regression', hidden_width=8, epochs=5, batch_size=10, seed=3)
    a, b = train(X, Y, cfg), train(X, Y, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays, b.params.arrays))
    assert a.report.train_loss == b.report.train_loss


def test_early_training_loss_mostly_decreases():
    X, Y = linear_data()
    cfg = TrainConfig(task='regression', hidden_width=16, epochs=11, batch_size=32, seed=0)
    hist = train(X, Y, cfg).report.train_loss
    steps = [later <= earlier for earlier, later in zip(hist, hist[1:])]
    assert len(steps) == 10
    assert sum(steps) >= 8


def test_oversized_batch_is_clipped(caplog):
    X, Y = linear_data(20)
    with caplog.at_level(logging.WARNING, logger='learner'):
        train(X, Y, TrainConfig(hidden_width=4, epochs=2, batch_size=1000))
    assert 'batch size 1000 exceeds 16 training rows' in caplog.text


def test_constant_feature_is_reported():
    X, Y = linear_data(40)
    X = np.hstack([X, np.ones_like(X)])
    model = train(X, Y, TrainConfig(hidden_width=4, epochs=2, batch_size=8))
    assert model.report.constant_features == (1,)
    assert np.all(np.isfinite(predict(model, X)))


def test_diverging_training_aborts():
    X, Y = linear_data(40)
    with pytest.raises(TrainingError) as exc:
        with np.errstate(all='ignore'):
            train(X, Y, TrainConfig(hidden_width=4, epochs=50, batch_size=8, lr=1e200))
    assert len(exc.value.history) < 50


def test_classifier_outputs_probabilities():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 3))
    Y = (X[:, :2] > 0).astype(float)
    model = train(X, Y, TrainConfig(task='classification', hidden_width=8, epochs=20, batch_size=10))
    P = predict(model, X)
    assert P.shape == (50, 2)
    assert np.all((P > 0) & (P < 1))
    assert model.y_scaler is None


def test_save_and_load(tmp_path):
    X, Y = linear_data(40)
    model = train(X, Y, TrainConfig(hidden_layers=2, hidden_width=4, epochs=3, batch_size=8))
    loaded = load_model(save_model(model, tmp_path / 'm' / 'regressor.json'))
    assert loaded.params.layer_sizes == (1, 4, 4, 1)
    assert np.array_equal(predict(loaded, X), predict(model, X))
    assert loaded.config == model.config


def test_predict_checks_width():
    X, Y = linear_data(20)
    model = train(X, Y, TrainConfig(hidden_width=4, epochs=1, batch_size=8))
    with pytest.raises(ValueError, match='feature width'):
        predict(model, np.ones((2, 3)))


def test_depth_sweep_reports_each_depth(capsys):
    X, Y = linear_data(40)
    rmse = depth_sweep(X, Y, (1, 2), TrainConfig(hidden_width=4, epochs=2, batch_size=8))
    assert sorted(rmse) == [1, 2]
    assert all(np.isfinite(v) for v in rmse.values())
    assert 'hidden_layers=2' in capsys.readouterr().out
