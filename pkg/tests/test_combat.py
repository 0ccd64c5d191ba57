import logging

import numpy as np
import pytest

from sitewiz import (
    ComBatHarmonizer,
    CovariateModelSpec,
    CovariateTerm,
    Dataset,
    HarmonizationModel,
    OneHotBasis,
    QuadraticBasis,
    SimulationConfig,
    SplineBasis,
    fit,
    harmonize,
    simulate_dataset,
    transform,
)
from sitewiz.errors import (
    SchemaError,
    SingularDesignError,
    UnseenSiteError,
    ValidationError,
)

from .conftest import make_dataset


def fitted_values(model: HarmonizationModel, data: Dataset) -> np.ndarray:
    return model.grand_means + model.covariate_design(data) @ model.covariate_coefficients


def test_parse_covariate_model():
    spec = CovariateModelSpec.parse("age:spline5, sex")
    assert spec.terms == (CovariateTerm("age", "spline", 5), CovariateTerm("sex"))
    assert str(spec) == "age:spline5,sex:linear"
    assert CovariateModelSpec.parse("age:spline").terms[0].df == 5
    assert CovariateModelSpec.parse("age:quadratic").terms[0].basis == "quadratic"
    assert CovariateModelSpec.coerce(None).terms == ()

    for text in ("age:spline2", "age:cubic", "age,age:quadratic", ":linear"):
        with pytest.raises(ValidationError):
            CovariateModelSpec.parse(text)


def test_single_site_is_identity(caplog):
    rng = np.random.default_rng(0)
    data = make_dataset(rng.normal(3, 1, size=(30, 4)), ["A"] * 30)
    model = fit(data, eb=False)
    np.testing.assert_allclose(model.site_location, 0, atol=1e-12)
    np.testing.assert_allclose(model.site_scale, 1, atol=1e-12)
    np.testing.assert_allclose(model.transform(data), data.features, atol=1e-10)

    with caplog.at_level(logging.WARNING, logger="sitewiz.combat"):
        model = fit(data, eb=True)

    assert not model.eb_enabled
    assert "Empirical Bayes needs at least 2 sites" in caplog.text


def test_constant_shift_between_two_sites():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, size=(20, 2))
    shift = np.array([1.5, -0.7])
    data = make_dataset(np.vstack((a, a + shift)), ["A"] * 20 + ["B"] * 20)
    model = fit(data, eb=False)

    sigma = a.std(axis=0)
    np.testing.assert_allclose(model.pooled_scale, sigma, rtol=1e-12)
    np.testing.assert_allclose(model.site_location[1] - model.site_location[0], shift / sigma, rtol=1e-10)

    harmonized = model.transform(data)
    np.testing.assert_allclose(harmonized[:20].mean(axis=0), harmonized[20:].mean(axis=0), atol=1e-10)


def test_site_effects_removed_without_eb(small_dataset):
    model = fit(small_dataset, "age", eb=False)
    harmonized = model.transform(small_dataset)
    residual = (harmonized - fitted_values(model, small_dataset)) / model.pooled_scale
    for site in small_dataset.site_registry:
        rows = small_dataset.sites == site
        np.testing.assert_allclose(residual[rows].mean(axis=0), 0, atol=1e-8)
        np.testing.assert_allclose(residual[rows].var(axis=0), 1, atol=1e-8)


def test_covariate_signal_preserved(caplog):
    config = SimulationConfig(
        k=2, n=250, gamma_sd=0, epsilon_sd=0, fixed_delta=True, inv_gamma_shapes=(3, 3)
    )
    data = simulate_dataset(config).dataset
    with caplog.at_level(logging.WARNING, logger="sitewiz.combat"):
        harmonized = harmonize(data, "age:quadratic", eb=False)

    assert np.max(np.abs(harmonized.features - data.features)) <= 1e-6
    assert "passed through unchanged" in caplog.text


def test_eb_shrinkage_direction(small_dataset):
    raw = fit(small_dataset, "age", eb=False)
    model = fit(small_dataset, "age", eb=True)
    assert model.eb_enabled
    priors = model.eb_hyperparams
    assert all(1 <= i <= 200 for i in priors.iterations)

    gamma_hat, delta2_hat = raw.site_location, raw.site_scale ** 2
    gamma_star, delta2_star = model.site_location, model.site_scale ** 2
    prior_mean = priors.location_mean[:, None]
    np.testing.assert_array_less(np.minimum(gamma_hat, prior_mean) - 1e-9, gamma_star)
    np.testing.assert_array_less(gamma_star, np.maximum(gamma_hat, prior_mean) + 1e-9)

    scale_prior = priors.scale_prior_mean[:, None]
    lower = np.minimum(delta2_hat, scale_prior)
    upper = np.maximum(delta2_hat + (gamma_hat - gamma_star) ** 2, scale_prior)
    np.testing.assert_array_less(lower - 1e-5, delta2_star)
    np.testing.assert_array_less(delta2_star, upper + 1e-5)


def test_transform_is_row_independent(small_dataset):
    model = fit(small_dataset, "age:spline5")
    whole = model.transform(small_dataset)
    first, second = small_dataset.subset(range(0, 75, 2)), small_dataset.subset(range(1, 75, 2))
    np.testing.assert_array_equal(whole[0::2], model.transform(first))
    np.testing.assert_array_equal(whole[1::2], model.transform(second))
    np.testing.assert_array_equal(whole, transform(model, small_dataset))
    np.testing.assert_array_equal(harmonize(small_dataset, "age:spline5").features, whole)


def test_identical_rows_in_different_sites(small_dataset):
    model = fit(small_dataset, "age")
    row = small_dataset.subset([0])
    twins = make_dataset(
        np.vstack([row.features[0]] * 3),
        ["site01", "site01", "site02"],
        age=[row.column("age")[0]] * 3,
    )
    twins = Dataset(
        twins.subject_ids, twins.features, small_dataset.feature_names,
        twins.sites, twins.covariates, site_registry=("site01", "site02"),
    )
    out = model.transform(twins)
    np.testing.assert_array_equal(out[0], out[1])
    assert np.all(out[0] != out[2])


def test_transform_errors(small_dataset):
    model = fit(small_dataset, "age")
    stranger = make_dataset(small_dataset.features[:2], ["X", "site01"], age=[30, 40])
    stranger = Dataset(
        stranger.subject_ids, stranger.features, small_dataset.feature_names, stranger.sites, stranger.covariates
    )
    with pytest.raises(UnseenSiteError, match="X"):
        model.transform(stranger)

    with pytest.raises(SchemaError):
        model.transform(small_dataset.with_features(small_dataset.features, ["a", "b", "c", "d"]))


def test_fit_errors():
    data = make_dataset(np.arange(5.0), ["A", "A", "A", "A", "B"])
    with pytest.raises(ValidationError, match="B"):
        fit(data, eb=False)

    confounded = make_dataset(np.arange(6.0) ** 2, ["A"] * 3 + ["B"] * 3, age=[0, 0, 0, 1, 1, 1])
    with pytest.raises(SingularDesignError):
        fit(confounded, "age", eb=False)

    with pytest.raises(SchemaError):
        fit(confounded, "sex", eb=False)


def test_categorical_covariate(sex_dataset):
    model = fit(sex_dataset, "age,sex")
    assert isinstance(model.bases[1], OneHotBasis)
    assert model.bases[1].levels == ("F", "M")
    assert model.covariate_coefficients.shape == (2, 3)
    np.testing.assert_allclose(model.covariate_coefficients[1], 0.2, atol=0.05)

    with pytest.raises(ValidationError):
        model.bases[1].design(np.array(["F", "X"]))


def test_quadratic_and_spline_bases(small_dataset):
    model = fit(small_dataset, "age:quadratic")
    basis = model.bases[0]
    assert isinstance(basis, QuadraticBasis)
    assert basis.center == pytest.approx(small_dataset.column("age").mean())

    spline = SplineBasis.from_training("age", np.linspace(0, 10, 50), 5)
    assert spline.n_columns == 5
    assert spline.boundary == (0, 10)
    beyond = spline.design(np.array([10.0, 11.0, 12.0]))
    np.testing.assert_allclose(beyond[2] - beyond[1], beyond[1] - beyond[0], atol=1e-12)

    with pytest.raises(SingularDesignError):
        SplineBasis.from_training("age", np.ones(10), 5)


def test_harmonizer_transformer(small_dataset):
    harmonizer = ComBatHarmonizer("age:spline5")
    assert harmonizer.covariates == CovariateModelSpec.parse("age:spline5")
    model = harmonizer.fit(small_dataset)
    assert isinstance(model, HarmonizationModel)
    assert model.basis_knots["age"] == model.bases[0].knots

    out = harmonizer.transform(model, small_dataset)
    assert out.subject_ids == small_dataset.subject_ids
    np.testing.assert_array_equal(out.column("age"), small_dataset.column("age"))


def test_harmonization_reduces_site_differences(small_dataset):
    harmonized = harmonize(small_dataset, "age")
    def spread(d):
        return np.ptp([d.features[d.sites == s].mean(axis=0) for s in d.site_registry], axis=0)

    assert np.all(spread(harmonized) < spread(small_dataset))
