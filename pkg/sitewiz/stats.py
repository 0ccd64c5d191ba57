"""
Module contains the performance metrics, hypothesis tests, effect sizes
and distribution overlap measures used to assess harmonization.
"""
from __future__ import annotations
from typing import Any, Callable, Literal, Optional, Sequence, Tuple, Union
from dataclasses import dataclass

import logging
import warnings

import numpy as np
import pandas as pd
from scipy import stats as sps
from sklearn import metrics as skm
import statsmodels.formula.api as smf
from statsmodels.stats.anova import anova_lm

from .dataset import Dataset
from .errors import DegenerateStatisticError, SchemaError, SingularDesignError, ValidationError
from .utilities import derive_seed, parallel_map
from .cache import cache_result
from .doc import doc_category


__all__ = (
    "Metric",
    "BALANCED_ACCURACY",
    "MEAN_ABSOLUTE_ERROR",
    "get_metric",
    "ConfusionMatrix",
    "Summary",
    "PerformanceSamples",
    "AncovaResult",
    "balanced_accuracy",
    "mean_absolute_error",
    "confusion_matrix",
    "normalize_confusion",
    "summarize",
    "age_bins",
    "age_group_permutation_test",
    "wilcoxon_one_sided",
    "paired_t_one_tailed",
    "bonferroni",
    "cohens_d_paired",
    "bhattacharyya_n",
    "age_distribution_overlap",
    "ancova_partial_eta2",
    "compare_leakage_cv",
)


logger = logging.getLogger(__name__)

Alternative = Literal["a_less", "a_greater"]
EXACT_WILCOXON_MAX_N = 25


def _check_paired(a: Any, b: Any) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"Paired samples must be 1D vectors of equal length, got {a.shape} and {b.shape}")

    return a, b


def _check_alternative(alternative: str):
    if alternative not in ("a_less", "a_greater"):
        raise ValidationError(f"alternative must be 'a_less' or 'a_greater', got '{alternative}'")


@doc_category("Statistics")
def balanced_accuracy(actual: Sequence, predicted: Sequence, classes: Optional[Sequence] = None) -> float:
    """
    Unweighted mean of the per-class recalls.

    Parameters
    ------------
    actual: Sequence
        True labels.
    predicted: Sequence
        Predicted labels.
    classes: Optional[Sequence]
        Classes to average over. Defaults to the classes present in ``actual``.

    Raises
    ------------
    DegenerateStatisticError
        A declared class has no actual instances.
    """
    actual, predicted = np.asarray(actual, dtype=object), np.asarray(predicted, dtype=object)
    if len(actual) != len(predicted) or not len(actual):
        raise ValidationError("actual and predicted must be non-empty and of equal length")

    if classes is None:
        classes = sorted(set(actual.tolist()))

    matrix = confusion_matrix(actual, predicted, classes)
    totals = matrix.counts.sum(axis=1)
    if np.any(totals == 0):
        empty = [str(c) for c, total in zip(matrix.classes, totals) if total == 0]
        raise DegenerateStatisticError(f"Class(es) without actual instances: {', '.join(empty)}")

    return float(np.mean(np.diag(matrix.counts) / totals))


@doc_category("Statistics")
def mean_absolute_error(actual: Sequence[float], predicted: Sequence[float]) -> float:
    "Mean absolute difference of equal length, non-empty vectors."
    actual, predicted = _check_paired(actual, predicted)
    if not len(actual):
        raise ValidationError("Mean absolute error of empty vectors")

    return float(skm.mean_absolute_error(actual, predicted))


@doc_category("Statistics")
@dataclass(frozen=True)
class Metric:
    """
    Performance metric.

    Parameters
    ------------
    name: str
        Name used in reports.
    function: Callable[[Sequence, Sequence], float]
        Called with (actual, predicted).
    greater_is_better: bool
        Direction of the metric.
    task: Literal["classification", "regression"]
        Learning task the metric scores.
    """
    name: str
    function: Callable[[Sequence, Sequence], float]
    greater_is_better: bool
    task: Literal["classification", "regression"]

    def __call__(self, actual: Sequence, predicted: Sequence) -> float:
        return self.function(actual, predicted)


BALANCED_ACCURACY = Metric("balanced_accuracy", balanced_accuracy, True, "classification")
MEAN_ABSOLUTE_ERROR = Metric("mean_absolute_error", mean_absolute_error, False, "regression")
METRICS = {m.name: m for m in (BALANCED_ACCURACY, MEAN_ABSOLUTE_ERROR)}


@doc_category("Statistics")
def get_metric(metric: Union[str, Metric]) -> Metric:
    "Returns the metric registered under ``metric`` (or ``metric`` itself)."
    if isinstance(metric, Metric):
        return metric

    try:
        return METRICS[metric]
    except KeyError as exc:
        raise ValidationError(f"Unknown metric '{metric}', choose from {sorted(METRICS)}") from exc


@doc_category("Statistics")
@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """
    Confusion matrix, rows are actual and columns predicted classes.
    Averaged matrices hold non-integer counts.
    """
    counts: np.ndarray
    classes: Tuple[Any, ...]

    def __post_init__(self):
        counts = np.array(self.counts)
        object.__setattr__(self, "classes", tuple(self.classes))
        if counts.shape != (len(self.classes), len(self.classes)):
            raise ValidationError(f"Counts of shape {counts.shape} do not match {len(self.classes)} classes")
        if np.any(counts < 0):
            raise ValidationError("Confusion counts must not be negative")

        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)


def _class_codes(labels: Sequence, index: dict) -> np.ndarray:
    # -1 marks labels outside the declared classes
    return np.array([index.get(label, -1) for label in np.asarray(labels).tolist()], dtype=np.int64)


@doc_category("Statistics")
def confusion_matrix(actual: Sequence, predicted: Sequence, classes: Sequence) -> ConfusionMatrix:
    "Counts (actual, predicted) pairs over ``classes``. Labels outside ``classes`` are ignored."
    classes = list(classes)
    index = {label: code for code, label in enumerate(np.asarray(classes).tolist())}
    counts = skm.confusion_matrix(
        _class_codes(actual, index), _class_codes(predicted, index), labels=np.arange(len(classes))
    )
    return ConfusionMatrix(counts, tuple(classes))


@doc_category("Statistics")
def normalize_confusion(matrix: ConfusionMatrix) -> np.ndarray:
    """
    Divides every row by its total, so rows sum to 1.

    Raises
    ------------
    DegenerateStatisticError
        A row sums to zero.
    """
    totals = matrix.counts.sum(axis=1, keepdims=True).astype(float)
    if np.any(totals == 0):
        raise DegenerateStatisticError("Cannot normalize a confusion matrix with an empty row")

    return matrix.counts / totals


@doc_category("Statistics")
@dataclass(frozen=True)
class Summary:
    "Location and spread of a sample."
    median: float
    iqr: float
    mean: float
    sd: float


@doc_category("Statistics")
def summarize(values: Sequence[float]) -> Summary:
    """
    Median, interquartile range, mean and sample standard deviation (0 for a single value).
    """
    values = np.asarray(values, dtype=float).ravel()
    if not len(values):
        raise ValidationError("Cannot summarize an empty sample")

    q1, median, q3 = np.percentile(values, [25, 50, 75])
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return Summary(float(median), float(q3 - q1), float(np.mean(values)), sd)


@doc_category("Statistics")
@dataclass(frozen=True, eq=False)
class PerformanceSamples:
    """
    Cross-validated performance.

    Parameters
    ------------
    metric: str
        Metric name.
    values: numpy.ndarray
        Metric per (repetition, fold), shape (repetitions, folds).
    actual: Optional[numpy.ndarray]
        True target of every row of the cross-validated dataset.
    predictions: Sequence[numpy.ndarray]
        Per repetition, the test-fold prediction of every row.
    """
    metric: str
    values: np.ndarray
    actual: Optional[np.ndarray] = None
    predictions: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or not values.size:
            raise ValidationError(f"Performance values must be a non-empty (repetitions, folds) matrix, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Performance values must be finite")
        if self.metric == BALANCED_ACCURACY.name and (values.min() < 0 or values.max() > 1):
            raise ValidationError("Balanced accuracy outside [0, 1]")
        if self.metric == MEAN_ABSOLUTE_ERROR.name and values.min() < 0:
            raise ValidationError("Negative mean absolute error")

        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "predictions", tuple(self.predictions))

    @property
    def repetitions(self) -> int:
        return self.values.shape[0]

    @property
    def folds(self) -> int:
        return self.values.shape[1]

    @property
    def repetition_means(self) -> np.ndarray:
        "Mean over folds, per repetition."
        return self.values.mean(axis=1)

    @property
    def summary(self) -> Summary:
        "Summary of the per-repetition means."
        return summarize(self.repetition_means)

    @property
    def median(self) -> float:
        return self.summary.median

    @property
    def iqr(self) -> float:
        return self.summary.iqr

    @property
    def mean(self) -> float:
        return self.summary.mean

    @property
    def sd(self) -> float:
        return self.summary.sd


@doc_category("Statistics")
def age_bins(age: Sequence[float], bin_width: float) -> np.ndarray:
    "Bin index ``floor((age - min(age)) / bin_width)`` of every subject."
    if bin_width <= 0:
        raise ValidationError(f"bin_width must be positive, got {bin_width}")

    age = np.asarray(age, dtype=float)
    return np.floor((age - age.min()) / bin_width).astype(int)


@doc_category("Statistics")
def age_group_permutation_test(
    observed: float,
    null_sampler: Callable[[np.ndarray], float],
    age: Sequence[float],
    bin_width: float = 5.0,
    n_perm: int = 1000,
    seed: int = 0,
    greater_is_better: bool = True,
    n_jobs: Optional[int] = 1,
) -> float:
    """
    Permutation test whose label shuffles are restricted to subjects of similar age.

    Parameters
    ------------
    observed: float
        The observed metric.
    null_sampler: Callable[[numpy.ndarray], float]
        Called with a row permutation ``perm`` (labels become ``labels[perm]``),
        returns the metric obtained with the permuted labels.
    age: Sequence[float]
        Age of every subject. Bins of width ``bin_width`` start at the minimal age.
    bin_width: float
        Width of the age bins, in years.
    n_perm: int
        Number of permutations.
    seed: int
        Seed. Permutation ``r`` uses a seed derived from ``(seed, r)``.
    greater_is_better: bool
        Counts permuted metrics ``>= observed`` when True, ``<= observed`` otherwise.
    n_jobs: Optional[int]
        Number of worker threads.

    Returns
    ----------
    float
        ``(#{permuted metric at least as good as observed} + 1) / (n_perm + 1)``.
    """
    if n_perm < 1:
        raise ValidationError(f"n_perm must be at least 1, got {n_perm}")

    bins = age_bins(age, bin_width)
    strata = [np.nonzero(bins == b)[0] for b in np.unique(bins)]
    if singletons := sum(len(s) == 1 for s in strata):
        warnings.warn(f"{singletons} age bin(s) hold a single subject and contribute no permutation.")

    def replica(r: int) -> float:
        rng = np.random.default_rng(derive_seed(seed, r))
        permutation = np.arange(len(bins))
        for members in strata:
            permutation[members] = rng.permutation(members)

        return float(null_sampler(permutation))

    logger.info("Permutation test: %d permutations, %d age bins", n_perm, len(strata))
    null = np.asarray(parallel_map(replica, range(n_perm), n_jobs))
    extreme = null >= observed if greater_is_better else null <= observed
    return float((np.count_nonzero(extreme) + 1) / (n_perm + 1))


@cache_result(max=64)
def _signed_rank_null(doubled_ranks: Tuple[int, ...]) -> np.ndarray:
    # number of sign vectors per value of the doubled positive rank sum
    counts = np.zeros(sum(doubled_ranks) + 1)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:len(counts) - rank]
        counts = counts + shifted

    distribution = counts / 2.0 ** len(doubled_ranks)
    distribution.setflags(write=False)
    return distribution


@doc_category("Statistics")
def wilcoxon_one_sided(
    a: Sequence[float],
    b: Sequence[float],
    alternative: Alternative,
    method: Literal["auto", "exact", "approx"] = "auto",
) -> float:
    """
    One-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are discarded, tied absolute differences get mid-ranks.
    The null distribution is enumerated exactly for up to 25 non-zero differences,
    larger samples use the normal approximation with continuity and tie correction.

    Parameters
    ------------
    a: Sequence[float]
        First sample.
    b: Sequence[float]
        Second sample, paired with ``a``.
    alternative: Literal["a_less", "a_greater"]
        ``a_greater`` tests whether ``a`` tends to exceed ``b``.
    method: Literal["auto", "exact", "approx"]
        Force the exact or the approximate null distribution.

    Raises
    ------------
    DegenerateStatisticError
        All differences are zero.
    """
    _check_alternative(alternative)
    a, b = _check_paired(a, b)
    differences = a - b
    differences = differences[differences != 0]
    n = len(differences)
    if not n:
        raise DegenerateStatisticError("All paired differences are zero")

    ranks = sps.rankdata(np.abs(differences))
    positive = float(ranks[differences > 0].sum())
    if method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N):
        doubled = tuple(int(round(2 * r)) for r in ranks)
        distribution = _signed_rank_null(doubled)
        observed = int(round(2 * positive))
        if alternative == "a_greater":
            return float(min(1.0, distribution[observed:].sum()))

        return float(min(1.0, distribution[:observed + 1].sum()))

    _, ties = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4
    variance = n * (n + 1) * (2 * n + 1) / 24 - np.sum(ties ** 3 - ties) / 48
    if variance <= 0:
        raise DegenerateStatisticError("Signed-rank statistic has zero variance")

    if alternative == "a_greater":
        p = sps.norm.sf((positive - mean - 0.5) / np.sqrt(variance))
    else:
        p = sps.norm.cdf((positive - mean + 0.5) / np.sqrt(variance))

    return float(np.clip(p, np.finfo(float).tiny, 1.0))


@doc_category("Statistics")
def paired_t_one_tailed(a: Sequence[float], b: Sequence[float], alternative: Alternative) -> float:
    """
    One-tailed paired Student t-test on the differences ``a - b``, ``n - 1`` degrees of freedom.

    Raises
    ------------
    DegenerateStatisticError
        The differences have zero variance.
    """
    _check_alternative(alternative)
    a, b = _check_paired(a, b)
    if len(a) < 2:
        raise ValidationError("A paired t-test needs at least 2 pairs")

    differences = a - b
    sd = np.std(differences, ddof=1)
    if sd == 0:
        raise DegenerateStatisticError("Paired differences have zero variance")

    statistic = differences.mean() / (sd / np.sqrt(len(differences)))
    distribution = sps.t(df=len(differences) - 1)
    p = distribution.sf(statistic) if alternative == "a_greater" else distribution.cdf(statistic)
    return float(np.clip(p, np.finfo(float).tiny, 1.0))


@doc_category("Statistics")
def bonferroni(p: float, m: int) -> float:
    "Bonferroni adjustment ``min(1, m * p)``."
    if m < 1:
        raise ValidationError(f"Number of comparisons must be at least 1, got {m}")

    return float(min(1.0, m * p))


@doc_category("Statistics")
def cohens_d_paired(external: Sequence[float], internal: Sequence[float]) -> float:
    """
    Paired Cohen's d, ``(mean(external) - mean(internal)) / sd(external - internal)``.

    Identical samples give 0.

    Raises
    ------------
    DegenerateStatisticError
        The differences are constant and non-zero.
    """
    external, internal = _check_paired(external, internal)
    if len(external) < 2:
        raise ValidationError("Cohen's d needs at least 2 pairs")

    differences = external - internal
    sd = np.std(differences, ddof=1)
    if sd == 0:
        if np.all(differences == 0):
            return 0.0

        raise DegenerateStatisticError("Paired differences have zero standard deviation")

    return float((external.mean() - internal.mean()) / sd)


@doc_category("Statistics")
def bhattacharyya_n(samples: Sequence[Sequence[float]], bins: Sequence[float]) -> float:
    """
    Bhattacharyya coefficient of n distributions, ``sum_bins (prod_g p_g) ** (1 / n)``,
    with every group histogrammed over the shared bin edges ``bins``.
    0 means disjoint and 1 identical distributions.

    Raises
    ------------
    DegenerateStatisticError
        A group has no values inside the bins.
    """
    edges = np.asarray(bins, dtype=float)
    if len(samples) < 2:
        raise ValidationError("At least 2 groups are needed")
    if len(edges) < 3:
        raise ValidationError("At least 2 bins (3 edges) are needed")

    probabilities = []
    for index, sample in enumerate(samples):
        counts, _ = np.histogram(np.asarray(sample, dtype=float), bins=edges)
        if counts.sum() == 0:
            raise DegenerateStatisticError(f"Group {index} has no values inside the bins")

        probabilities.append(counts / counts.sum())

    product = np.prod(probabilities, axis=0)
    return float(np.clip(np.sum(product ** (1 / len(samples))), 0.0, 1.0))


@doc_category("Statistics")
def age_distribution_overlap(data: Dataset, bin_width: float = 1.0, age_column: str = "age") -> float:
    """
    Bhattacharyya coefficient of the per-site age distributions, over shared
    bins of ``bin_width`` years spanning the pooled age range.
    """
    age = np.asarray(data.column(age_column), dtype=float)
    if bin_width <= 0:
        raise ValidationError(f"bin_width must be positive, got {bin_width}")

    lo, hi = age.min(), age.max()
    n_bins = max(2, int(np.floor((hi - lo) / bin_width)) + 1)
    edges = lo + bin_width * np.arange(n_bins + 1)
    groups = [age[data.sites == site] for site in data.site_registry if np.any(data.sites == site)]
    return bhattacharyya_n(groups, edges)


@doc_category("Statistics")
@dataclass(frozen=True)
class AncovaResult:
    "Site effect of an ANCOVA on one feature."
    feature: str
    partial_eta2: float
    p_value: float
    f_statistic: float
    df_site: int
    df_residual: int


def _ancova_term(name: str, data: Dataset) -> Tuple[str, str]:
    column, squared = (name[:-2], True) if name.endswith("^2") else (name, False)
    if column not in data.covariates.columns:
        raise SchemaError(f"Covariate '{column}' does not exist")
    if column in data.categorical:
        if squared:
            raise SchemaError(f"Cannot square the categorical covariate '{column}'")

        return column, f"C(Q('{column}'))"

    return column, f"I(Q('{column}') ** 2)" if squared else f"Q('{column}')"


@doc_category("Statistics")
def ancova_partial_eta2(
    data: Dataset,
    feature: str,
    covariates: Sequence[str] = ("age", "age^2", "sex"),
) -> AncovaResult:
    """
    Linear model of ``feature`` with the effects coded site factor and ``covariates``,
    type III sums of squares. The site effect size is the partial eta squared
    ``SS_site / (SS_site + SS_residual)``, its p-value the site F-test.

    Parameters
    ------------
    data: Dataset
        Data with at least 2 sites.
    feature: str
        Feature name.
    covariates: Sequence[str]
        Covariate columns, ``name^2`` adds the square of a numeric covariate.

    Raises
    ------------
    SingularDesignError
        The design is rank deficient (e.g. a site confounded with a covariate).
    DegenerateStatisticError
        The site F-test is undefined, e.g. for a constant feature.
    """
    if feature not in data.feature_names:
        raise SchemaError(f"Feature '{feature}' does not exist")
    if len(set(data.sites)) < 2:
        raise ValidationError("ANCOVA of the site factor needs at least 2 sites")

    frame = pd.DataFrame({"_y": data.features[:, data.feature_names.index(feature)], "_site": data.sites})
    terms = ["C(_site, Sum)"]
    for name in covariates:
        column, term = _ancova_term(name, data)
        frame[column] = data.covariates[column].to_numpy()
        terms.append(term)

    model = smf.ols(f"_y ~ {' + '.join(terms)}", data=frame).fit()
    exog = model.model.exog
    if np.linalg.matrix_rank(exog) < exog.shape[1]:
        raise SingularDesignError(f"ANCOVA design of feature '{feature}' is rank deficient")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        table = anova_lm(model, typ=3)

    site, residual = table.loc["C(_site, Sum)"], table.loc["Residual"]
    total = site["sum_sq"] + residual["sum_sq"]
    if not np.isfinite(site["PR(>F)"]):
        raise DegenerateStatisticError(f"Site F-test of feature '{feature}' is undefined (no residual variance)")

    eta2 = float(site["sum_sq"] / total) if total > 0 else 0.0
    p_value = float(np.clip(site["PR(>F)"], np.finfo(float).tiny, 1.0))
    return AncovaResult(feature, eta2, p_value, float(site["F"]), int(site["df"]), int(residual["df"]))


@doc_category("Statistics")
def compare_leakage_cv(leaked: PerformanceSamples, in_cv: PerformanceSamples) -> float:
    """
    One-sided Wilcoxon test that harmonizing the whole dataset before cross-validation
    gives lower metric values (lower site balanced accuracy, lower age error) than
    harmonizing inside cross-validation, pairing identical (repetition, fold) splits.
    """
    if leaked.values.shape != in_cv.values.shape:
        raise ValidationError("Samples must come from the same cross-validation scheme")

    return wilcoxon_one_sided(leaked.values.ravel(), in_cv.values.ravel(), "a_less")
