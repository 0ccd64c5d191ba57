import numpy as np
import pytest

from sitewiz import (
    ComBatHarmonizer,
    CvScheme,
    DESK_SCALE,
    EfficacyReport,
    GbtClassifier,
    GbtParams,
    HarmonizedSnapshot,
    SIMULATION_PRESETS,
    RunScale,
    SimulationConfig,
    Verdict,
    assess_efficacy,
    bonferroni,
    compare_age_prediction,
    derive_seed,
    efficacy_verdict,
    leakage_experiment,
    mode_pipeline,
    shape_set,
    simulate_dataset,
    split_fingerprint,
    split_holdout,
)
from sitewiz.errors import ValidationError


FAST = GbtParams(n_rounds=10, max_depth=2)
TINY_SCALE = RunScale(repetitions=2, n_perm=1, cv_repetitions=1)


def leakage_config(n=40, seed=2):
    return SimulationConfig(k=3, n=n, V=4, gamma_sd=0.5, inv_gamma_shapes=shape_set(3), seed=seed)


def test_verdict_rule():
    assert efficacy_verdict(0.2, None) is Verdict.REMOVED
    assert efficacy_verdict(0.05, 0.01) is Verdict.REMOVED
    assert efficacy_verdict(0.01, 0.01) is Verdict.REDUCED
    assert efficacy_verdict(0.01, 0.2) is Verdict.NOT_REDUCED
    assert efficacy_verdict(0.01, None) is Verdict.NOT_REDUCED


def test_report_verdict_must_follow():
    with pytest.raises(ValidationError):
        EfficacyReport("raw", None, None, 0.01, None, Verdict.REMOVED)


def test_mode_pipeline(small_dataset):
    classifier = GbtClassifier(FAST)
    assert mode_pipeline(small_dataset, "raw", classifier).steps == ()
    assert isinstance(mode_pipeline(small_dataset, "harmonize_all", classifier).steps[0], HarmonizedSnapshot)
    step = mode_pipeline(small_dataset, "harmonizer_in_cv", classifier, "age", eb=False).steps[0]
    assert isinstance(step, ComBatHarmonizer)
    assert not step.eb
    with pytest.raises(ValidationError):
        mode_pipeline(small_dataset, "sometimes", classifier)


def test_split_fingerprint():
    assert split_fingerprint(["b", "a"]) == split_fingerprint(("a", "b"))
    assert split_fingerprint(["a"]) != split_fingerprint(["a", "b"])
    assert len(split_fingerprint([])) == 64


def test_run_scale():
    with pytest.raises(ValidationError):
        RunScale(repetitions=1, n_perm=10, cv_repetitions=1)


def test_efficacy_raw_site_effect(small_dataset):
    report = assess_efficacy(small_dataset, "raw", CvScheme(5, 2), n_perm=20, params=FAST)
    assert report.raw_samples is report.harmonized_samples
    assert report.raw_samples.median > 0.8
    assert report.permutation_p == pytest.approx(1 / 21)
    assert report.wilcoxon_p is None
    assert report.verdict is Verdict.NOT_REDUCED


def test_efficacy_harmonizer_in_cv(small_dataset):
    report = assess_efficacy(small_dataset, "harmonizer_in_cv", CvScheme(5, 2), n_perm=20, covariates="age", params=FAST)
    assert report.harmonized_samples.median < report.raw_samples.median
    assert report.wilcoxon_p < 0.05
    assert report.verdict in (Verdict.REMOVED, Verdict.REDUCED)


def test_efficacy_needs_two_sites(small_dataset):
    with pytest.raises(ValidationError):
        assess_efficacy(small_dataset.subset(range(25)), "raw", n_perm=1)


def test_leakage_experiment_shape():
    report = leakage_experiment(leakage_config(), "site", 3, TINY_SCALE, params=FAST, covariates="age")
    assert report.repetitions == 3
    assert report.metric == "balanced_accuracy"
    for arm in ("external", "internal_leaked", "internal_not_leaked"):
        values = report.arm(arm)
        assert values.shape == (3,)
        assert np.all((values >= 0) & (values <= 1))

    for prints in report.fingerprints:
        assert len(set(prints.values())) == 1

    assert len({prints["external"] for prints in report.fingerprints}) == 3
    assert set(report.comparisons) == {"internal_leaked", "internal_not_leaked"}
    assert report.external_mean == pytest.approx(report.external.mean())


def test_leakage_arms_share_the_holdout_split():
    config = leakage_config()
    report = leakage_experiment(config, "site", 2, TINY_SCALE, params=FAST, covariates="age")
    data = simulate_dataset(config).dataset
    for repetition, prints in enumerate(report.fingerprints):
        _, external = split_holdout(data, 0.5, "site", derive_seed(config.seed, repetition))
        assert prints == dict.fromkeys(prints, split_fingerprint(external.subject_ids))

    for comparison in report.comparisons.values():
        if comparison.p_value is not None:
            assert comparison.p_adjusted == bonferroni(comparison.p_value, len(report.comparisons))


def test_leakage_experiment_is_deterministic():
    a = leakage_experiment(leakage_config(), "age", 2, TINY_SCALE, params=FAST, covariates="age")
    b = leakage_experiment(leakage_config(), "age", 2, TINY_SCALE, params=FAST, covariates="age", n_jobs=2)
    assert a.metric == "mean_absolute_error"
    for arm in ("external", "internal_leaked", "internal_not_leaked"):
        np.testing.assert_array_equal(a.arm(arm), b.arm(arm))

    assert a.fingerprints == b.fingerprints


def test_leakage_experiment_errors():
    with pytest.raises(ValidationError):
        leakage_experiment(leakage_config(), "site", 1, TINY_SCALE)

    with pytest.raises(ValidationError):
        leakage_experiment(leakage_config(), "sex", 2, TINY_SCALE)


def test_compare_age_prediction(small_dataset):
    comparison = compare_age_prediction(small_dataset, CvScheme(5, 2), covariates="age", params=FAST)
    assert comparison.leaked.values.shape == comparison.in_cv.values.shape == (2, 5)
    assert 0 < comparison.wilcoxon_p <= 1


@pytest.mark.slow
def test_leaked_harmonization_hides_the_site():
    scale = RunScale(repetitions=10, n_perm=1, cv_repetitions=2)
    report = leakage_experiment(leakage_config(n=100, seed=7), "site", 10, scale, params=FAST, covariates="age")
    assert report.internal_leaked.mean() < report.internal_not_leaked.mean()


def preset_leakage(name, task="site", repetitions=20):
    return leakage_experiment(SIMULATION_PRESETS[name], task, repetitions, DESK_SCALE, covariates="age")


@pytest.mark.slow
@pytest.mark.parametrize("k", [3, 10, 36])
@pytest.mark.parametrize("n", [25, 250])
def test_leakage_ordering(k, n):
    report = preset_leakage(f"ct-k{k}-n{n}")
    leaked = report.comparisons["internal_leaked"]
    assert leaked.mean < report.external_mean
    assert bonferroni(leaked.p_value, 12) < 0.01
    not_leaked_gap = abs(report.comparisons["internal_not_leaked"].mean - report.external_mean)
    assert not_leaked_gap < report.external_mean - leaked.mean


@pytest.mark.slow
def test_leakage_shrinks_with_sample_size():
    reports = [preset_leakage(f"ct-k36-n{n}") for n in (25, 250)]
    small, large = (report.external_mean - report.comparisons["internal_leaked"].mean for report in reports)
    assert small > large


@pytest.mark.slow
def test_age_leakage_lowers_error():
    report = preset_leakage("ct-k36-n25", task="age")
    leaked = report.comparisons["internal_leaked"]
    assert leaked.mean < report.external_mean
    assert leaked.p_value < 0.05


@pytest.mark.slow
def test_efficacy_null_without_site_effect():
    scheme = CvScheme(folds=5, repetitions=2, stratify_by="site")
    calm = 0
    for seed in range(10):
        config = SimulationConfig(
            k=3, n=25, gamma_sd=0.0, fixed_delta=True, inv_gamma_shapes=shape_set(3), seed=seed
        )
        data = simulate_dataset(config).dataset
        report = assess_efficacy(data, "raw", scheme, n_perm=19, params=FAST, seed=seed)
        calm += report.permutation_p >= 0.05

    assert calm >= 8
