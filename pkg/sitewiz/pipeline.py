"""
Module contains the transformer / estimator contracts, pipelines
and leakage-free cross-validation.

Every cross-validation step fits its transformers on the training fold only,
test folds are only ever passed to ``transform`` and ``predict``.
"""
from __future__ import annotations
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field
from abc import ABC, abstractmethod
from collections import Counter

import logging

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold

from .dataset import Dataset
from .errors import CvStepError, SchemaError, StratificationError, ValidationError
from .predict import GbtModel, GbtParams, train_classifier, train_regressor
from .stats import ConfusionMatrix, Metric, PerformanceSamples, confusion_matrix, get_metric
from .utilities import parallel_map
from .doc import doc_category


__all__ = (
    "Transformer",
    "Estimator",
    "IdentityTransformer",
    "HarmonizedSnapshot",
    "MajorityClassifier",
    "MeanRegressor",
    "GbtClassifier",
    "GbtRegressor",
    "Pipeline",
    "FittedPipeline",
    "CvScheme",
    "stratified_kfold",
    "run_cv",
    "average_confusion",
    "permutation_null_sampler",
)


logger = logging.getLogger(__name__)

Split = Tuple[np.ndarray, np.ndarray]


@doc_category("Pipelines")
class Transformer(ABC):
    """
    Learns a state from a dataset and transforms datasets with it.

    ``fit`` must only read its argument and ``transform`` must not modify the state.
    """
    @abstractmethod
    def fit(self, data: Dataset) -> Any:
        "Learns and returns the state."

    @abstractmethod
    def transform(self, state: Any, data: Dataset) -> Dataset:
        "Returns ``data`` with transformed features."


@doc_category("Pipelines")
class Estimator(ABC):
    """
    Final step of a pipeline, predicts a target from the features.
    """
    @abstractmethod
    def fit(self, data: Dataset, target: np.ndarray) -> Any:
        "Learns and returns the state."

    @abstractmethod
    def predict(self, state: Any, data: Dataset) -> np.ndarray:
        "Predicts the target of every row of ``data``."


@doc_category("Pipelines")
class IdentityTransformer(Transformer):
    "Leaves datasets unchanged."
    def fit(self, data: Dataset) -> None:
        return None

    def transform(self, state: None, data: Dataset) -> Dataset:
        return data


@doc_category("Pipelines")
@dataclass(frozen=True, eq=False)
class HarmonizedSnapshot(Transformer):
    """
    Replaces features with precomputed ones, looked up by subject id.

    Used to cross-validate data that was harmonized as a whole beforehand,
    with the splits of the original dataset.

    Parameters
    ------------
    snapshot: Dataset
        Dataset holding the replacement features of every subject.
    """
    snapshot: Dataset

    def fit(self, data: Dataset) -> None:
        return None

    def transform(self, state: None, data: Dataset) -> Dataset:
        lookup = {subject: row for row, subject in enumerate(self.snapshot.subject_ids)}
        if missing := [s for s in data.subject_ids if s not in lookup]:
            raise SchemaError(f"{len(missing)} subject(s) missing from the snapshot, e.g. '{missing[0]}'")

        rows = [lookup[s] for s in data.subject_ids]
        return data.with_features(self.snapshot.features[rows], self.snapshot.feature_names)


@doc_category("Pipelines")
class MajorityClassifier(Estimator):
    "Predicts the most frequent training label (the smallest one on ties)."
    def fit(self, data: Dataset, target: np.ndarray) -> Any:
        counts = Counter(np.asarray(target, dtype=object).tolist())
        top = max(counts.values())
        return min(label for label, count in counts.items() if count == top)

    def predict(self, state: Any, data: Dataset) -> np.ndarray:
        return np.full(data.n, state, dtype=object)


@doc_category("Pipelines")
class MeanRegressor(Estimator):
    "Predicts the mean training target."
    def fit(self, data: Dataset, target: np.ndarray) -> float:
        return float(np.mean(np.asarray(target, dtype=float)))

    def predict(self, state: float, data: Dataset) -> np.ndarray:
        return np.full(data.n, state)


@doc_category("Pipelines")
@dataclass(frozen=True)
class GbtClassifier(Estimator):
    "Boosted tree classifier, see :func:`sitewiz.predict.train_classifier`."
    params: GbtParams = field(default_factory=GbtParams)

    def fit(self, data: Dataset, target: np.ndarray) -> GbtModel:
        return train_classifier(data.features, target, self.params)

    def predict(self, state: GbtModel, data: Dataset) -> np.ndarray:
        return state.predict(data.features)


@doc_category("Pipelines")
@dataclass(frozen=True)
class GbtRegressor(Estimator):
    "Boosted tree regressor, see :func:`sitewiz.predict.train_regressor`."
    params: GbtParams = field(default_factory=GbtParams)

    def fit(self, data: Dataset, target: np.ndarray) -> GbtModel:
        return train_regressor(data.features, target, self.params)

    def predict(self, state: GbtModel, data: Dataset) -> np.ndarray:
        return state.predict(data.features)


@doc_category("Pipelines")
@dataclass(frozen=True)
class FittedPipeline:
    "States of a fitted :class:`Pipeline`, one per step."
    pipeline: Pipeline
    states: Tuple[Any, ...]
    estimator_state: Any

    def transform(self, data: Dataset) -> Dataset:
        "Applies the fitted transformers."
        for step, state in zip(self.pipeline.steps, self.states):
            data = step.transform(state, data)

        return data

    def predict(self, data: Dataset) -> np.ndarray:
        return self.pipeline.final.predict(self.estimator_state, self.transform(data))


@doc_category("Pipelines")
@dataclass(frozen=True)
class Pipeline:
    """
    Chain of transformers followed by an estimator.

    Parameters
    ------------
    steps: Sequence[Transformer]
        Transformers, applied in order.
    final: Estimator
        The estimator.

    Example
    -----------
    .. code-block:: python

        pipeline = Pipeline([ComBatHarmonizer("age:spline5")], GbtClassifier())
        fitted = pipeline.fit(train, train.sites)
        predicted = fitted.predict(test)
    """
    steps: Tuple[Transformer, ...]
    final: Estimator

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not all(isinstance(step, Transformer) for step in self.steps):
            raise ValidationError("Pipeline steps must be transformers")
        if not isinstance(self.final, Estimator):
            raise ValidationError("The final pipeline step must be an estimator")

    def fit(self, data: Dataset, target: Sequence) -> FittedPipeline:
        "Fits every step on ``data``, each on the output of the previous step."
        states = []
        for step in self.steps:
            state = step.fit(data)
            data = step.transform(state, data)
            states.append(state)

        return FittedPipeline(self, tuple(states), self.final.fit(data, np.asarray(target)))


@doc_category("Pipelines")
@dataclass(frozen=True)
class CvScheme:
    """
    Repeated (stratified) k-fold cross-validation.

    Parameters
    ------------
    folds: int
        Number of folds (>= 2).
    repetitions: int
        Number of repetitions (>= 1). Repetition ``r`` shuffles with seed ``seed + r``.
    stratify_by: Optional[str]
        ``"site"``, a covariate column or None (plain k-fold).
    seed: int
        Base seed.
    """
    folds: int = 5
    repetitions: int = 1
    stratify_by: Optional[str] = "site"
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValidationError(f"folds must be at least 2, got {self.folds}")
        if self.repetitions < 1:
            raise ValidationError(f"repetitions must be at least 1, got {self.repetitions}")

    def splits(self, data: Dataset, repetition: int) -> List[Split]:
        "The (train, test) index pairs of ``repetition``."
        seed = self.seed + repetition
        if self.stratify_by is None:
            if self.folds > data.n:
                raise StratificationError(f"{self.folds} folds requested for {data.n} rows")

            return [(train, test) for train, test in KFold(self.folds, shuffle=True, random_state=seed).split(data.features)]

        return stratified_kfold(data.column(self.stratify_by), self.folds, seed)


@doc_category("Pipelines")
def stratified_kfold(labels: Sequence, folds: int, seed: int) -> List[Split]:
    """
    Stratified k-fold partition of ``range(len(labels))``.

    Every stratum is spread over the folds so that its per-fold counts differ by at most one.

    Raises
    ------------
    StratificationError
        A stratum has fewer members than ``folds``.
    """
    labels = np.asarray(labels).astype(str)
    if folds < 2:
        raise ValidationError(f"folds must be at least 2, got {folds}")

    sizes = Counter(labels.tolist())
    if small := sorted(label for label, size in sizes.items() if size < folds):
        raise StratificationError(
            f"Strata smaller than the {folds} folds: "
            + ", ".join(f"{label} ({sizes[label]})" for label in small)
        )

    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2 ** 32))
    return [(train, test) for train, test in splitter.split(np.zeros((len(labels), 1)), labels)]


def _run_fold(
    pipeline: Pipeline,
    data: Dataset,
    target: np.ndarray,
    metric: Metric,
    repetition: int,
    fold: int,
    split: Split,
) -> Tuple[float, np.ndarray]:
    train, test = split
    try:
        fitted = pipeline.fit(data.subset(train), target[train])
        predicted = fitted.predict(data.subset(test))
        score = metric(target[test], predicted)
    except Exception as exc:
        raise CvStepError(repetition, fold, exc) from exc

    logger.debug("Repetition %d, fold %d: %s = %.6g", repetition, fold, metric.name, score)
    return score, predicted


@doc_category("Pipelines")
def run_cv(
    pipeline: Pipeline,
    data: Dataset,
    target: Union[str, Sequence],
    scheme: CvScheme,
    metric: Union[str, Metric],
    n_jobs: Optional[int] = 1,
) -> PerformanceSamples:
    """
    Cross-validates ``pipeline``. Every (repetition, fold) fits all the steps on the
    training fold, transforms both folds with the fitted states and scores the
    estimator's test-fold predictions.

    Parameters
    ------------
    pipeline: Pipeline
        Unfitted pipeline.
    data: Dataset
        The data.
    target: str | Sequence
        Column name (``"site"`` or a covariate) or the target values themselves.
    scheme: CvScheme
        Fold scheme.
    metric: str | Metric
        Metric (e.g. ``"balanced_accuracy"``).
    n_jobs: Optional[int]
        Worker threads. Results do not depend on it.

    Raises
    ------------
    StratificationError
        A stratum is smaller than the fold count.
    CvStepError
        A step failed, carries the repetition and fold.
    """
    metric = get_metric(metric)
    target = np.asarray(data.column(target) if isinstance(target, str) else target)
    if len(target) != data.n:
        raise ValidationError(f"{len(target)} target values given for {data.n} rows")

    splits = [scheme.splits(data, r) for r in range(scheme.repetitions)]
    tasks = [(r, f, split) for r, folds in enumerate(splits) for f, split in enumerate(folds)]
    logger.info(
        "Cross-validating %d repetition(s) x %d folds on %d rows (%s)",
        scheme.repetitions, scheme.folds, data.n, metric.name
    )
    results = parallel_map(lambda task: _run_fold(pipeline, data, target, metric, *task), tasks, n_jobs)

    values = np.empty((scheme.repetitions, scheme.folds))
    predictions = [np.empty(data.n, dtype=target.dtype if metric.task == "regression" else object) for _ in splits]
    for (r, f, (_, test)), (score, predicted) in zip(tasks, results):
        values[r, f] = score
        predictions[r][test] = predicted

    return PerformanceSamples(metric.name, values, target, tuple(predictions))


@doc_category("Pipelines")
def average_confusion(samples: PerformanceSamples, classes: Optional[Sequence] = None) -> ConfusionMatrix:
    """
    Confusion matrix of every repetition's test-fold predictions, averaged over repetitions.
    """
    if samples.actual is None or not samples.predictions:
        raise ValidationError("The samples hold no predictions")

    if classes is None:
        classes = sorted(set(np.asarray(samples.actual, dtype=object).tolist()))

    counts = np.mean(
        [confusion_matrix(samples.actual, predicted, classes).counts for predicted in samples.predictions],
        axis=0
    )
    return ConfusionMatrix(counts, tuple(classes))


@doc_category("Pipelines")
def permutation_null_sampler(
    pipeline: Pipeline,
    data: Dataset,
    target: Union[str, Sequence],
    scheme: CvScheme,
    metric: Union[str, Metric],
    repetitions: int = 1,
) -> Callable[[np.ndarray], float]:
    """
    Builds the callable used by :func:`sitewiz.stats.age_group_permutation_test`.

    Given a row permutation, the returned function cross-validates ``pipeline`` with
    the permuted target (features, sites and folds unchanged) over ``repetitions``
    repetitions of ``scheme`` and returns the median metric.
    """
    target = np.asarray(data.column(target) if isinstance(target, str) else target)
    scheme = CvScheme(scheme.folds, repetitions, scheme.stratify_by, scheme.seed)

    def sampler(permutation: np.ndarray) -> float:
        return run_cv(pipeline, data, target[permutation], scheme, metric).median

    return sampler
