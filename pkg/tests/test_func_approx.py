import numpy as np
import pytest
from pydantic import ValidationError

from errors import DataValueError, DomainError, NonConvergenceError, SerializationError, ShapeError, SizeError
from func_approx import (
    CallableRegressor,
    RegressorSpec,
    build_features,
    fit,
    mlp_loss_and_gradients,
    one_hot,
    regressor_from_blob,
    split_features,
)

LINEAR = RegressorSpec(model_type="linear")


def _ridge_oracle(X, Y, ridge):
    design = np.hstack([X, np.ones((X.shape[0], 1))])
    penalty = np.diag([ridge] * X.shape[1] + [0.0])
    return np.linalg.solve(design.T @ design + penalty, design.T @ Y)


def test_linear_fit_recovers_affine_map():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    Y = X @ np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]]) + np.array([0.25, -1.0])
    model, report = fit(LINEAR, X, Y)

    np.testing.assert_allclose(model.predict(X), Y, atol=1e-8)
    assert report.converged
    assert report.epochs_run == len(report.loss_curve) == 1


def test_linear_fit_matches_normal_equations():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 4))
    Y = rng.normal(size=(30, 2))
    spec = RegressorSpec(model_type="linear", ridge=0.5)
    model, _ = fit(spec, X, Y)
    solution = np.vstack([model.coef, model.intercept])

    oracle = _ridge_oracle(X, Y, 0.5)
    np.testing.assert_allclose(solution, oracle, atol=1e-8)
    design = np.hstack([X, np.ones((30, 1))])
    lhs = (design.T @ design + np.diag([0.5] * 4 + [0.0])) @ solution
    assert np.linalg.norm(lhs - design.T @ Y) < 1e-8
    np.testing.assert_allclose(model.predict(X), design @ oracle, atol=1e-8)


def test_linear_fit_handles_collinear_columns():
    x = np.linspace(0, 1, 20)
    X = np.column_stack([x, x])
    model, _ = fit(LINEAR, X, 2 * x + 1)
    np.testing.assert_allclose(model.predict(X)[:, 0], 2 * x + 1, atol=1e-6)


def test_predict_is_row_wise():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 2))
    model, _ = fit(RegressorSpec(hidden_sizes=(8,), max_epochs=20, seed=3), X, np.sin(X[:, 0]))
    order = rng.permutation(40)
    np.testing.assert_allclose(model.predict(X[order]), model.predict(X)[order], rtol=0, atol=1e-12)


def test_predict_rejects_wrong_width():
    model, _ = fit(LINEAR, np.ones((5, 2)) * np.arange(5)[:, None], np.arange(5.0))
    with pytest.raises(ShapeError):
        model.predict(np.ones((3, 3)))


def test_nn_beats_mean_predictor_on_sine():
    X = np.linspace(-3, 3, 200)[:, None]
    y = np.sin(X[:, 0])
    _, report = fit(RegressorSpec(seed=0), X, y)
    assert report.final_loss < np.var(y)
    assert np.all(np.isfinite(report.loss_curve))


def test_nn_is_deterministic_given_seed():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(60, 3)), rng.normal(size=60)
    probe = rng.normal(size=(10, 3))
    spec = RegressorSpec(hidden_sizes=(16, 8), max_epochs=50, seed=7)
    first, _ = fit(spec, X, y)
    second, _ = fit(spec, X, y)
    np.testing.assert_array_equal(first.predict(probe), second.predict(probe))


def test_minibatch_sgd_runs():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(64, 2))
    y = X[:, 0] - X[:, 1]
    spec = RegressorSpec(optimizer="sgd", batch_size=16, learning_rate=0.05, max_epochs=100, seed=1)
    model, report = fit(spec, X, y)
    assert report.final_loss < np.var(y)
    assert model.predict(X).shape == (64, 1)


def test_one_epoch_is_not_converged():
    X = np.linspace(-3, 3, 100)[:, None]
    _, report = fit(RegressorSpec(max_epochs=1, seed=0), X, np.sin(X))
    assert not report.converged
    assert report.epochs_run == 1


def test_divergent_training_raises():
    X = np.linspace(-3, 3, 50)[:, None]
    spec = RegressorSpec(optimizer="sgd", learning_rate=1e6, seed=0)
    with pytest.raises(NonConvergenceError, match="diverged"):
        fit(spec, X, np.sin(X))


def test_constant_targets_do_not_break_standardization():
    X = np.random.default_rng(6).normal(size=(20, 2))
    model, report = fit(RegressorSpec(max_epochs=30, seed=0), X, np.full(20, 3.0))
    assert np.all(np.isfinite(model.predict(X)))
    assert report.final_loss <= report.loss_curve[0]


def test_gradient_check():
    rng = np.random.default_rng(8)
    weights = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    biases = [rng.normal(size=4), rng.normal(size=2)]
    X, Y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))

    _, grad_w, grad_b = mlp_loss_and_gradients(weights, biases, X, Y)
    analytic = np.concatenate([g.ravel() for g in grad_w + grad_b])

    params = weights + biases
    numeric = []
    h = 1e-6
    for param in params:
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            up = mlp_loss_and_gradients(weights, biases, X, Y)[0]
            param[index] = original - h
            down = mlp_loss_and_gradients(weights, biases, X, Y)[0]
            param[index] = original
            numeric.append((up - down) / (2 * h))
    numeric = np.array(numeric)

    rel_err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    assert rel_err < 1e-4


@pytest.mark.parametrize("spec", [LINEAR, RegressorSpec(hidden_sizes=(5, 3), max_epochs=5, seed=2)])
def test_blob_restores_predictions(spec):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(25, 3))
    model, _ = fit(spec, X, rng.normal(size=(25, 2)))
    restored = regressor_from_blob(model.to_blob())
    np.testing.assert_array_equal(restored.predict(X), model.predict(X))


def test_bad_blobs():
    with pytest.raises(SerializationError):
        regressor_from_blob(b"not an archive")
    with pytest.raises(SerializationError):
        CallableRegressor(lambda X: X, 1, 1).to_blob()


def test_fit_input_errors():
    with pytest.raises(SizeError):
        fit(LINEAR, np.empty((0, 2)), np.empty((0, 1)))
    with pytest.raises(DataValueError):
        fit(LINEAR, [[1.0], [np.nan]], [1.0, 2.0])
    with pytest.raises(ShapeError):
        fit(LINEAR, np.ones((3, 1)), np.ones(4))


def test_spec_validation():
    with pytest.raises(ValidationError):
        RegressorSpec(model_type="nn", hidden_sizes=())
    with pytest.raises(ValidationError):
        RegressorSpec(tolerance=0.0)
    with pytest.raises(ValidationError):
        RegressorSpec(model_type="tree")
    assert RegressorSpec(model_type="linear", hidden_sizes=()).model_type == "linear"


def test_feature_layout():
    features = build_features([[1.0], [0.0]], [[0.5, 2.0], [1.5, -1.0]], [2, 0], num_actions=3)
    np.testing.assert_array_equal(features, [[1, 0.5, 2, 0, 0, 1], [0, 1.5, -1, 1, 0, 0]])
    zs, states, actions = split_features(features, 1, 2)
    np.testing.assert_array_equal(actions, [2, 0])
    with pytest.raises(DomainError):
        one_hot([3], 3)
