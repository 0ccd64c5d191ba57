"""
Module contains the harmonization assessment protocols: the efficacy
assessment of a harmonization mode and the data leakage experiment.
"""
from __future__ import annotations
from typing import Dict, Literal, Optional, Tuple, Union
from dataclasses import dataclass
from enum import Enum

import hashlib
import logging
import warnings

import numpy as np

from .combat import ComBatHarmonizer, CovariateModelSpec, fit, harmonize
from .dataset import Dataset, split_holdout
from .errors import DegenerateStatisticError, ValidationError
from .pipeline import (
    CvScheme,
    Estimator,
    GbtClassifier,
    GbtRegressor,
    HarmonizedSnapshot,
    Pipeline,
    permutation_null_sampler,
    run_cv,
)
from .predict import GbtParams
from .simulate import SimulationConfig, simulate_dataset
from .stats import (
    BALANCED_ACCURACY,
    MEAN_ABSOLUTE_ERROR,
    Metric,
    PerformanceSamples,
    age_group_permutation_test,
    bonferroni,
    cohens_d_paired,
    compare_leakage_cv,
    paired_t_one_tailed,
    wilcoxon_one_sided,
)
from .utilities import derive_seed, parallel_map
from .doc import doc_category


__all__ = (
    "RunScale",
    "DESK_SCALE",
    "FULL_SCALE",
    "Verdict",
    "EfficacyReport",
    "ArmComparison",
    "LeakageReport",
    "AgePredictionComparison",
    "efficacy_verdict",
    "split_fingerprint",
    "mode_pipeline",
    "assess_efficacy",
    "leakage_experiment",
    "compare_age_prediction",
)


logger = logging.getLogger(__name__)

SIGNIFICANCE = 0.05
DEFAULT_COVARIATES = "age:spline5"
EfficacyMode = Literal["raw", "harmonize_all", "harmonizer_in_cv"]
Task = Literal["site", "age"]


@doc_category("Audit")
@dataclass(frozen=True)
class RunScale:
    """
    Sizes of the assessment protocols.

    Parameters
    ------------
    repetitions: int
        Leakage experiment repetitions and efficacy cross-validation repetitions.
    n_perm: int
        Permutations of the efficacy permutation test.
    cv_repetitions: int
        Repetitions of the cross-validation inside every leakage repetition.
    """
    repetitions: int
    n_perm: int
    cv_repetitions: int

    def __post_init__(self):
        if self.repetitions < 2 or self.n_perm < 1 or self.cv_repetitions < 1:
            raise ValidationError(f"Invalid run scale {self}")


DESK_SCALE = RunScale(repetitions=20, n_perm=1000, cv_repetitions=10)
FULL_SCALE = RunScale(repetitions=100, n_perm=5000, cv_repetitions=10)


@doc_category("Audit")
class Verdict(str, Enum):
    "Outcome of the efficacy assessment."
    REMOVED = "Removed"
    REDUCED = "Reduced"
    NOT_REDUCED = "NotReduced"


@doc_category("Audit")
def efficacy_verdict(permutation_p: float, wilcoxon_p: Optional[float]) -> Verdict:
    """
    Two-step rule: the site effect is removed when site prediction is not significant
    under the permutation test. Otherwise it is reduced when harmonized site prediction
    is significantly worse than raw site prediction.
    """
    if permutation_p >= SIGNIFICANCE:
        return Verdict.REMOVED
    if wilcoxon_p is not None and wilcoxon_p < SIGNIFICANCE:
        return Verdict.REDUCED

    return Verdict.NOT_REDUCED


@doc_category("Audit")
@dataclass(frozen=True, eq=False)
class EfficacyReport:
    """
    Result of :func:`assess_efficacy`.

    Parameters
    ------------
    mode: str
        Harmonization mode.
    raw_samples: PerformanceSamples
        Site prediction without harmonization.
    harmonized_samples: PerformanceSamples
        Site prediction in ``mode`` (the raw samples in raw mode).
    permutation_p: float
        Age-group permutation p-value of ``harmonized_samples``.
    wilcoxon_p: Optional[float]
        One-sided Wilcoxon p-value of harmonized below raw (None in raw mode).
    verdict: Verdict
        See :func:`efficacy_verdict`.
    """
    mode: str
    raw_samples: PerformanceSamples
    harmonized_samples: PerformanceSamples
    permutation_p: float
    wilcoxon_p: Optional[float]
    verdict: Verdict

    def __post_init__(self):
        if self.verdict is not efficacy_verdict(self.permutation_p, self.wilcoxon_p):
            raise ValidationError("Verdict does not follow from the p-values")


@doc_category("Audit")
def split_fingerprint(subject_ids) -> str:
    "SHA-256 of the sorted, newline joined subject ids."
    return hashlib.sha256("\n".join(sorted(map(str, subject_ids))).encode("utf-8")).hexdigest()


def _task_setup(task: Task, params: GbtParams) -> Tuple[str, Estimator, Metric]:
    if task == "site":
        return "site", GbtClassifier(params), BALANCED_ACCURACY
    if task == "age":
        return "age", GbtRegressor(params), MEAN_ABSOLUTE_ERROR

    raise ValidationError(f"Unknown task '{task}', choose 'site' or 'age'")


@doc_category("Audit")
def mode_pipeline(
    data: Dataset,
    mode: EfficacyMode,
    estimator: Estimator,
    covariates: Union[CovariateModelSpec, str, None] = DEFAULT_COVARIATES,
    eb: bool = True,
) -> Pipeline:
    """
    Pipeline of a harmonization mode: no step (``raw``), the features of ``data``
    harmonized as a whole (``harmonize_all``) or a harmonizer step (``harmonizer_in_cv``).
    """
    if mode == "raw":
        return Pipeline((), estimator)
    if mode == "harmonize_all":
        return Pipeline((HarmonizedSnapshot(harmonize(data, covariates, eb)),), estimator)
    if mode == "harmonizer_in_cv":
        return Pipeline((ComBatHarmonizer(CovariateModelSpec.coerce(covariates), eb),), estimator)

    raise ValidationError(f"Unknown mode '{mode}', choose from raw, harmonize_all and harmonizer_in_cv")


@doc_category("Audit")
def assess_efficacy(
    data: Dataset,
    mode: EfficacyMode,
    scheme: Optional[CvScheme] = None,
    n_perm: int = DESK_SCALE.n_perm,
    covariates: Union[CovariateModelSpec, str, None] = DEFAULT_COVARIATES,
    eb: bool = True,
    params: GbtParams = GbtParams(),
    bin_width: float = 5.0,
    seed: int = 0,
    n_jobs: Optional[int] = 1,
) -> EfficacyReport:
    """
    Assesses how well a harmonization mode removes the site effect.

    Site prediction balanced accuracy is cross-validated without harmonization and
    in ``mode``. A permutation test of the harmonized performance, with labels shuffled
    within age bins, decides whether the site is still predictable. A one-sided Wilcoxon
    test on the paired (repetition, fold) accuracies decides whether it became less predictable.

    Parameters
    ------------
    data: Dataset
        Data of at least 2 sites.
    mode: Literal["raw", "harmonize_all", "harmonizer_in_cv"]
        ``raw`` (no harmonization), ``harmonize_all`` (whole dataset harmonized before
        cross-validation, leaks test folds) or ``harmonizer_in_cv`` (harmonizer as pipeline step).
    scheme: Optional[CvScheme]
        Defaults to 20 repetitions of site-stratified 5-fold cross-validation.
    n_perm: int
        Permutations.
    covariates: CovariateModelSpec | str | None
        Covariates preserved by the harmonizer.
    eb: bool
        Empirical Bayes harmonization.
    params: GbtParams
        Site classifier hyperparameters.
    bin_width: float
        Age bin width of the permutation test, in years.
    seed: int
        Permutation seed.
    n_jobs: Optional[int]
        Worker threads.
    """
    if len(set(data.sites)) < 2:
        raise ValidationError("Efficacy assessment needs at least 2 sites")

    scheme = scheme or CvScheme(folds=5, repetitions=DESK_SCALE.repetitions, stratify_by="site", seed=seed)
    classifier = GbtClassifier(params)
    raw_pipeline = mode_pipeline(data, "raw", classifier)
    logger.info("Efficacy assessment (%s): k=%d, n=%d", mode, len(set(data.sites)), data.n)
    raw = run_cv(raw_pipeline, data, "site", scheme, BALANCED_ACCURACY, n_jobs)
    if mode == "raw":
        pipeline, harmonized = raw_pipeline, raw
    else:
        pipeline = mode_pipeline(data, mode, classifier, covariates, eb)
        harmonized = run_cv(pipeline, data, "site", scheme, BALANCED_ACCURACY, n_jobs)

    sampler = permutation_null_sampler(pipeline, data, "site", scheme, BALANCED_ACCURACY)
    permutation_p = age_group_permutation_test(
        harmonized.median, sampler, data.column("age"), bin_width, n_perm, seed, n_jobs=n_jobs
    )

    wilcoxon_p = None
    if mode != "raw":
        try:
            wilcoxon_p = wilcoxon_one_sided(harmonized.values.ravel(), raw.values.ravel(), "a_less")
        except DegenerateStatisticError:
            warnings.warn("Harmonized and raw accuracies are identical on every fold.")
            wilcoxon_p = 1.0

    verdict = efficacy_verdict(permutation_p, wilcoxon_p)
    logger.info("Efficacy (%s): permutation p=%.4g, Wilcoxon p=%s, %s", mode, permutation_p, wilcoxon_p, verdict.value)
    return EfficacyReport(mode, raw, harmonized, permutation_p, wilcoxon_p, verdict)


@doc_category("Audit")
@dataclass(frozen=True)
class ArmComparison:
    """
    Internal arm against the external arm.

    Parameters
    ------------
    mean: float
        Mean performance of the internal arm.
    sd: float
        Standard deviation of the internal arm.
    p_value: Optional[float]
        One-tailed paired t-test p-value of internal below external.
    p_adjusted: Optional[float]
        Bonferroni adjusted ``p_value``.
    cohens_d: Optional[float]
        Paired Cohen's d of external against internal.
    """
    mean: float
    sd: float
    p_value: Optional[float]
    p_adjusted: Optional[float]
    cohens_d: Optional[float]


@doc_category("Audit")
@dataclass(frozen=True, eq=False)
class LeakageReport:
    """
    Result of :func:`leakage_experiment`. Performance values are per repetition.

    Parameters
    ------------
    task: str
        ``site`` or ``age``.
    metric: str
        Metric name.
    external: numpy.ndarray
        Harmonizer and predictor fitted on the data set, scored on the external test set.
    internal_leaked: numpy.ndarray
        Data set harmonized as a whole, then cross-validated.
    internal_not_leaked: numpy.ndarray
        Harmonizer inside cross-validation.
    fingerprints: Sequence[Dict[str, str]]
        Per repetition and arm, the fingerprint of the subjects the arm never fitted on
        nor cross-validated. The arms of a repetition agree on it.
    comparisons: Dict[str, ArmComparison]
        Internal arm statistics, by arm name.
    external_mean: float
        Mean of the external arm.
    external_sd: float
        Standard deviation of the external arm.
    """
    task: str
    metric: str
    external: np.ndarray
    internal_leaked: np.ndarray
    internal_not_leaked: np.ndarray
    fingerprints: Tuple[Dict[str, str], ...]
    comparisons: Dict[str, ArmComparison]
    external_mean: float
    external_sd: float

    @property
    def repetitions(self) -> int:
        return len(self.external)

    def arm(self, name: str) -> np.ndarray:
        "Per repetition values of arm ``name``."
        return getattr(self, name)


def _leakage_repetition(
    data: Dataset,
    repetition: int,
    seed: int,
    task: Task,
    scale: RunScale,
    folds: int,
    params: GbtParams,
    covariates: CovariateModelSpec,
    eb: bool,
) -> Tuple[float, float, float, Dict[str, str]]:
    target, estimator, metric = _task_setup(task, params)
    seed = derive_seed(seed, repetition)
    data_set, external = split_holdout(data, 0.5, "site", seed)

    def untouched(*used) -> str:
        return split_fingerprint(set(data.subject_ids).difference(*used))

    fit_part, _ = split_holdout(data_set, 0.8, "site", derive_seed(seed, 1))
    model = fit(fit_part, covariates, eb)
    harmonized_set = data_set.with_features(model.transform(data_set))
    harmonized_external = external.with_features(model.transform(external))
    state = estimator.fit(harmonized_set, harmonized_set.column(target))
    external_score = metric(harmonized_external.column(target), estimator.predict(state, harmonized_external))

    scheme = CvScheme(folds=folds, repetitions=scale.cv_repetitions, stratify_by="site", seed=seed)
    not_leaked = run_cv(Pipeline((ComBatHarmonizer(covariates, eb),), estimator), data_set, target, scheme, metric)

    snapshot = harmonize(data_set, covariates, eb)
    leaked = run_cv(Pipeline((HarmonizedSnapshot(snapshot),), estimator), data_set, target, scheme, metric)

    cv_subjects = _cv_subjects(data_set, scheme)
    # every arm reports the subjects kept out of all its fitting
    fingerprints = {
        "external": split_fingerprint(set(harmonized_external.subject_ids) - set(harmonized_set.subject_ids)),
        "internal_leaked": untouched(snapshot.subject_ids, cv_subjects),
        "internal_not_leaked": untouched(cv_subjects),
    }
    logger.debug(
        "Leakage repetition %d: external=%.4f, leaked=%.4f, not leaked=%.4f",
        repetition, external_score, leaked.values.mean(), not_leaked.values.mean()
    )
    return external_score, float(leaked.values.mean()), float(not_leaked.values.mean()), fingerprints


def _cv_subjects(data: Dataset, scheme: CvScheme) -> set:
    "Subject ids that enter any training or test fold of ``scheme``."
    subjects = np.asarray(data.subject_ids, dtype=object)
    return {
        subject
        for r in range(scheme.repetitions)
        for train, test in scheme.splits(data, r)
        for subject in subjects[np.concatenate((train, test))].tolist()
    }


def _compare_arm(external: np.ndarray, internal: np.ndarray, m: int) -> ArmComparison:
    try:
        p_value = paired_t_one_tailed(internal, external, "a_less")
    except DegenerateStatisticError:
        warnings.warn("Internal and external arms differ by a constant, no t-test possible.")
        p_value = None

    try:
        d = cohens_d_paired(external, internal)
    except DegenerateStatisticError:
        d = None

    return ArmComparison(
        mean=float(internal.mean()),
        sd=float(internal.std(ddof=1)),
        p_value=p_value,
        p_adjusted=None if p_value is None else bonferroni(p_value, m),
        cohens_d=d,
    )


@doc_category("Audit")
def leakage_experiment(
    config: Union[SimulationConfig, Dataset],
    task: Task = "site",
    repetitions: int = DESK_SCALE.repetitions,
    scale: RunScale = DESK_SCALE,
    folds: int = 5,
    params: GbtParams = GbtParams(),
    covariates: Union[CovariateModelSpec, str, None] = DEFAULT_COVARIATES,
    eb: bool = True,
    seed: Optional[int] = None,
    n_jobs: Optional[int] = 1,
) -> LeakageReport:
    """
    Measures how leaking test data into harmonization biases cross-validated performance.

    Every repetition splits the data, stratified by site, into a data set and an external
    test set of equal size, and scores three arms on that split:

    - external: harmonizer fitted on a random 80 % of the data set, predictor trained on the
      harmonized data set, scored on the harmonized external test set;
    - internal not leaked: harmonizer and predictor as a pipeline in repeated stratified
      cross-validation of the data set;
    - internal leaked: data set harmonized as a whole, then the same cross-validation with the predictor.

    Parameters
    ------------
    config: SimulationConfig | Dataset
        Configuration of the simulated data, or the data itself.
    task: Literal["site", "age"]
        Predict the site (balanced accuracy) or the age (mean absolute error).
    repetitions: int
        Repetitions (>= 2).
    scale: RunScale
        Supplies the cross-validation repetitions.
    folds: int
        Cross-validation folds.
    params: GbtParams
        Predictor hyperparameters, identical in all arms.
    covariates: CovariateModelSpec | str | None
        Harmonization covariates.
    eb: bool
        Empirical Bayes harmonization.
    seed: Optional[int]
        Split seed, defaults to the simulation seed.
    n_jobs: Optional[int]
        Worker threads over repetitions.

    Raises
    ------------
    StratificationError
        A site is too small for the hold-out split or the folds.
    """
    if repetitions < 2:
        raise ValidationError(f"At least 2 repetitions are needed, got {repetitions}")

    _task_setup(task, params)
    if isinstance(config, SimulationConfig):
        data = simulate_dataset(config).dataset
        seed = config.seed if seed is None else seed
    else:
        data, seed = config, seed or 0

    covariates = CovariateModelSpec.coerce(covariates)
    logger.info("Leakage experiment (%s): %d repetitions, n=%d, k=%d", task, repetitions, data.n, data.k)
    results = parallel_map(
        lambda r: _leakage_repetition(data, r, seed, task, scale, folds, params, covariates, eb),
        range(repetitions),
        n_jobs,
    )
    external, leaked, not_leaked = (np.array(arm) for arm in list(zip(*results))[:3])
    fingerprints = tuple(r[3] for r in results)
    for repetition, prints in enumerate(fingerprints):
        if len(set(prints.values())) != 1:
            raise ValidationError(f"Arms of repetition {repetition} used different splits")

    internal_arms = {"internal_leaked": leaked, "internal_not_leaked": not_leaked}
    comparisons = {
        name: _compare_arm(external, values, len(internal_arms)) for name, values in internal_arms.items()
    }
    return LeakageReport(
        task=task,
        metric=_task_setup(task, params)[2].name,
        external=external,
        internal_leaked=leaked,
        internal_not_leaked=not_leaked,
        fingerprints=fingerprints,
        comparisons=comparisons,
        external_mean=float(external.mean()),
        external_sd=float(external.std(ddof=1)),
    )


@doc_category("Audit")
@dataclass(frozen=True, eq=False)
class AgePredictionComparison:
    """
    Age prediction with the dataset harmonized as a whole against the harmonizer
    inside cross-validation, on identical splits.
    """
    leaked: PerformanceSamples
    in_cv: PerformanceSamples
    wilcoxon_p: float


@doc_category("Audit")
def compare_age_prediction(
    data: Dataset,
    scheme: Optional[CvScheme] = None,
    covariates: Union[CovariateModelSpec, str, None] = DEFAULT_COVARIATES,
    eb: bool = True,
    params: GbtParams = GbtParams(),
    n_jobs: Optional[int] = 1,
) -> AgePredictionComparison:
    """
    Cross-validates age prediction (mean absolute error) after harmonizing the whole
    dataset and with the harmonizer as a pipeline step, then tests with a one-sided
    Wilcoxon test whether harmonizing the whole dataset gives lower errors.

    ``scheme`` defaults to 20 repetitions of site-stratified 5-fold cross-validation.
    """
    scheme = scheme or CvScheme(folds=5, repetitions=DESK_SCALE.repetitions, stratify_by="site")
    regressor = GbtRegressor(params)
    snapshot = HarmonizedSnapshot(harmonize(data, covariates, eb))
    leaked = run_cv(Pipeline((snapshot,), regressor), data, "age", scheme, MEAN_ABSOLUTE_ERROR, n_jobs)
    harmonizer = ComBatHarmonizer(CovariateModelSpec.coerce(covariates), eb)
    in_cv = run_cv(Pipeline((harmonizer,), regressor), data, "age", scheme, MEAN_ABSOLUTE_ERROR, n_jobs)
    return AgePredictionComparison(leaked, in_cv, compare_leakage_cv(leaked, in_cv))
