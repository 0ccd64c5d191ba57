import numpy as np
import pytest

from sitewiz import (
    SKLEARN_WRAPPER_DEFAULTS,
    GbtParams,
    balanced_accuracy,
    predict,
    train_classifier,
    train_regressor,
)
from sitewiz.errors import ValidationError


def test_params_validation():
    assert GbtParams() == GbtParams(100, 0.3, 6, 1.0, 1.0, 1.0, 0)
    assert (SKLEARN_WRAPPER_DEFAULTS.learning_rate, SKLEARN_WRAPPER_DEFAULTS.max_depth) == (0.1, 3)
    assert GbtParams().with_seed(5).seed == 5
    for kwargs in ({"n_rounds": 0}, {"learning_rate": 0}, {"max_depth": 0}, {"subsample": 1.5}, {"l2_lambda": -1}):
        with pytest.raises(ValidationError):
            GbtParams(**kwargs)


def test_single_class_is_rejected():
    with pytest.raises(ValidationError):
        train_classifier(np.zeros((4, 1)), ["a"] * 4, classes=["a", "b"])

    with pytest.raises(ValidationError):
        train_classifier(np.zeros((4, 1)), ["a", "b", "c", "a"], classes=["a", "b"])


def test_separable_two_classes():
    X = np.array([[0.1], [0.4], [0.5], [1.3], [1.8], [2.0]])
    y = ["low"] * 3 + ["high"] * 3
    model = train_classifier(X, y, GbtParams(n_rounds=10))
    assert model.classes == ("high", "low")
    assert balanced_accuracy(y, model.predict(X)) == 1.0
    assert model.trees[0][0].splits() == [(0, pytest.approx(0.9))]


def test_xor():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    y = [0, 1, 1, 0]
    model = train_classifier(X, y, GbtParams(n_rounds=20, max_depth=2, min_child_weight=0))
    np.testing.assert_array_equal(model.predict(X).astype(int), y)


def test_probabilities_and_multiclass():
    rng = np.random.default_rng(2)
    centers = np.array([[0, 0], [3, 0], [0, 3]])
    labels = np.repeat([0, 1, 2], 20)
    X = centers[labels] + rng.normal(0, 0.3, size=(60, 2))
    model = train_classifier(X, labels, GbtParams(n_rounds=20))
    probabilities = model.predict_proba(X)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1)
    np.testing.assert_array_equal(np.argmax(probabilities, axis=1), model.predict(X).astype(int))
    assert balanced_accuracy(labels, model.predict(X)) == 1.0


def test_training_loss_decreases():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(80, 3))
    y = np.where(X[:, 0] + 0.5 * rng.normal(size=80) > 0, "a", "b")
    model = train_classifier(X, y, GbtParams(n_rounds=30))
    assert np.all(np.diff(model.training_loss) <= 1e-12)

    regressor = train_regressor(X, X[:, 1] * 2 + rng.normal(size=80), GbtParams(n_rounds=30))
    assert np.all(np.diff(regressor.training_loss) <= 1e-12)


def test_constant_target():
    X = np.arange(10.0).reshape(-1, 1)
    model = train_regressor(X, np.full(10, 4.2), GbtParams(n_rounds=1))
    np.testing.assert_array_equal(model.predict(X), 4.2)


def test_step_function():
    X = np.linspace(0, 1, 50).reshape(-1, 1)
    y = np.where(X[:, 0] < 0.5, 1.0, 3.0)
    model = train_regressor(X, y)
    assert np.mean(np.abs(model.predict(X) - y)) < 0.01


def test_memorizes_training_rows():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(32, 2))
    y = rng.choice(["a", "b", "c"], size=32)
    model = train_classifier(X, y, GbtParams(max_depth=8, min_child_weight=0))
    np.testing.assert_array_equal(predict(model, X), y)


def test_predict_contract():
    X = np.arange(8.0).reshape(4, 2)
    model = train_regressor(X, [1.0, 2.0, 3.0, 4.0], GbtParams(n_rounds=5))
    assert predict(model, np.empty((0, 2))).shape == (0,)
    np.testing.assert_array_equal(predict(model, X), predict(model, X))
    with pytest.raises(ValidationError):
        predict(model, np.zeros((2, 3)))

    with pytest.raises(ValidationError):
        model.predict_proba(X)


def test_feature_permutation_equivariance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 3))
    y = X[:, 0] - X[:, 2] + 0.1 * rng.normal(size=40)
    order = [2, 0, 1]
    model = train_regressor(X, y, GbtParams(n_rounds=10))
    permuted = train_regressor(X[:, order], y, GbtParams(n_rounds=10))
    np.testing.assert_allclose(model.predict(X), permuted.predict(X[:, order]))


def test_subsample_is_seeded():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 2))
    y = X[:, 0] + rng.normal(size=50)
    a = train_regressor(X, y, GbtParams(n_rounds=5, subsample=0.5, seed=1))
    b = train_regressor(X, y, GbtParams(n_rounds=5, subsample=0.5, seed=1))
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
