"""
Module contains a gradient boosted decision tree learner with second-order
(Newton) leaf weights and exact greedy splits, for multiclass classification
and squared-error regression.
"""
from __future__ import annotations
from typing import Any, List, Literal, Optional, Sequence, Tuple
from dataclasses import dataclass, field, replace

import logging

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ValidationError
from .utilities import as_finite_matrix
from .doc import doc_category


__all__ = (
    "GbtParams",
    "SKLEARN_WRAPPER_DEFAULTS",
    "RegressionTree",
    "GbtModel",
    "train_classifier",
    "train_regressor",
    "predict",
)


logger = logging.getLogger(__name__)

MIN_HESSIAN = 1e-16


@doc_category("Prediction")
@dataclass(frozen=True)
class GbtParams:
    """
    Boosting hyperparameters. The defaults are the native defaults of XGBoost 0.90.

    Parameters
    ------------
    n_rounds: int
        Boosting rounds.
    learning_rate: float
        Shrinkage applied to every leaf weight, in (0, 1].
    max_depth: int
        Maximal tree depth.
    min_child_weight: float
        Minimal hessian sum of a child node.
    l2_lambda: float
        L2 regularization of the leaf weights.
    subsample: float
        Proportion of rows sampled (without replacement) per round, in (0, 1].
    seed: int
        Row subsampling seed.
    """
    n_rounds: int = 100
    learning_rate: float = 0.3
    max_depth: int = 6
    min_child_weight: float = 1.0
    l2_lambda: float = 1.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValidationError(f"n_rounds must be at least 1, got {self.n_rounds}")
        if not 0 < self.learning_rate <= 1:
            raise ValidationError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.max_depth < 1:
            raise ValidationError(f"max_depth must be at least 1, got {self.max_depth}")
        if not 0 < self.subsample <= 1:
            raise ValidationError(f"subsample must be in (0, 1], got {self.subsample}")
        if self.min_child_weight < 0 or self.l2_lambda < 0:
            raise ValidationError("min_child_weight and l2_lambda must not be negative")

    def with_seed(self, seed: int) -> GbtParams:
        return replace(self, seed=seed)


# Defaults of the scikit-learn wrapper of XGBoost 0.90
SKLEARN_WRAPPER_DEFAULTS = GbtParams(learning_rate=0.1, max_depth=3)


@doc_category("Prediction")
@dataclass(frozen=True, eq=False)
class RegressionTree:
    """
    Binary tree in array form. Node 0 is the root, leaves have ``feature == -1``.
    Rows with ``x[feature] < threshold`` go to the left child.
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):  # children always follow their parent
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[self.right[node]] = depths[node] + 1

        return int(depths.max())

    def splits(self) -> List[Tuple[int, float]]:
        "(feature, threshold) of every internal node in node order."
        internal = np.nonzero(self.feature >= 0)[0]
        return [(int(self.feature[i]), float(self.threshold[i])) for i in internal]

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        while len(rows):
            current = node[rows]
            internal = self.feature[current] >= 0
            rows, current = rows[internal], current[internal]
            go_left = X[rows, self.feature[current]] < self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])

        return self.value[node]


class _TreeBuilder:
    def __init__(self, X: np.ndarray, gradient: np.ndarray, hessian: np.ndarray, params: GbtParams):
        self.X = X
        self.gradient = gradient
        self.hessian = hessian
        self.params = params
        self.nodes: List[List[Any]] = []

    def _weight(self, G: float, H: float) -> float:
        return -G / (H + self.params.l2_lambda) * self.params.learning_rate

    def _best_split(self, rows: np.ndarray, G: float, H: float) -> Optional[Tuple[float, int, float]]:
        lambda_, min_weight = self.params.l2_lambda, self.params.min_child_weight
        parent_score = G ** 2 / (H + lambda_)
        best = None
        for feature in range(self.X.shape[1]):
            order = rows[np.argsort(self.X[rows, feature], kind="stable")]
            values = self.X[order, feature]
            boundaries = np.nonzero(values[:-1] < values[1:])[0]
            if not len(boundaries):
                continue

            GL = np.cumsum(self.gradient[order])[boundaries]
            HL = np.cumsum(self.hessian[order])[boundaries]
            GR, HR = G - GL, H - HL
            gain = GL ** 2 / (HL + lambda_) + GR ** 2 / (HR + lambda_) - parent_score
            gain[(HL < min_weight) | (HR < min_weight)] = -np.inf
            position = int(np.argmax(gain))  # first maximum, i.e. the lowest threshold
            if gain[position] >= 0 and (best is None or gain[position] > best[0]):
                threshold = (values[boundaries[position]] + values[boundaries[position] + 1]) / 2
                best = (float(gain[position]), feature, float(threshold))

        return best

    def _grow(self, rows: np.ndarray, depth: int) -> int:
        G, H = float(self.gradient[rows].sum()), float(self.hessian[rows].sum())
        index = len(self.nodes)
        self.nodes.append([-1, 0.0, -1, -1, self._weight(G, H)])
        if depth >= self.params.max_depth or len(rows) < 2:
            return index

        # a zero gain split is still taken unless every gradient is zero
        split = self._best_split(rows, G, H) if np.any(self.gradient[rows] != 0) else None
        if split is None:
            return index

        _, feature, threshold = split
        go_left = self.X[rows, feature] < threshold
        left = self._grow(rows[go_left], depth + 1)
        right = self._grow(rows[~go_left], depth + 1)
        self.nodes[index][:4] = [feature, threshold, left, right]
        return index

    def build(self, rows: np.ndarray) -> RegressionTree:
        self._grow(rows, 0)
        feature, threshold, left, right, value = zip(*self.nodes)
        return RegressionTree(
            feature=np.array(feature, dtype=np.intp),
            threshold=np.array(threshold, dtype=float),
            left=np.array(left, dtype=np.intp),
            right=np.array(right, dtype=np.intp),
            value=np.array(value, dtype=float),
        )


@doc_category("Prediction")
@dataclass(frozen=True, eq=False)
class GbtModel:
    """
    Fitted boosting model, produced by :func:`train_classifier` or :func:`train_regressor`.

    Parameters
    ------------
    task: Literal["multiclass", "regression"]
        Learning task.
    trees: Sequence[Sequence[RegressionTree]]
        Trees per round, one per class (a single one for regression).
    base_score: numpy.ndarray
        Initial score per class (one value for regression).
    n_features: int
        Number of training features.
    classes: Optional[Sequence]
        Class labels, indexing the score columns (multiclass only).
    training_loss: Sequence[float]
        Training loss after every round.
    """
    task: Literal["multiclass", "regression"]
    trees: Tuple[Tuple[RegressionTree, ...], ...]
    base_score: np.ndarray
    n_features: int
    classes: Optional[Tuple[Any, ...]] = None
    training_loss: Tuple[float, ...] = field(default=())

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def raw_scores(self, X: Any) -> np.ndarray:
        """
        Returns the summed leaf values plus the base score, shape (n, n_classes) or (n, 1).
        """
        X = as_finite_matrix(X, columns=self.n_features)
        scores = np.tile(self.base_score, (len(X), 1))
        for round_trees in self.trees:
            for column, tree in enumerate(round_trees):
                scores[:, column] += tree.predict(X)

        return scores

    def predict(self, X: Any) -> np.ndarray:
        """
        Class labels (multiclass, the lower class index wins ties) or predicted values (regression).
        """
        scores = self.raw_scores(X)
        if self.task == "regression":
            return scores[:, 0]

        return np.asarray(self.classes, dtype=object)[np.argmax(scores, axis=1)]

    def predict_proba(self, X: Any) -> np.ndarray:
        "Softmax class probabilities (multiclass only)."
        if self.task != "multiclass":
            raise ValidationError("Class probabilities only exist for classification models")

        return softmax(self.raw_scores(X), axis=1)


def _round_rows(n: int, params: GbtParams, rng: np.random.Generator) -> np.ndarray:
    if params.subsample >= 1:
        return np.arange(n)

    size = max(1, int(round(params.subsample * n)))
    return np.sort(rng.choice(n, size=size, replace=False))


@doc_category("Prediction")
def train_classifier(
    X: Any,
    y: Sequence,
    params: GbtParams = GbtParams(),
    classes: Optional[Sequence] = None,
) -> GbtModel:
    """
    Trains a softmax boosting classifier. Every round fits one tree per class
    to the gradients and hessians of the softmax cross-entropy.

    Parameters
    ------------
    X: ArrayLike
        Feature matrix (n, V).
    y: Sequence
        Class labels.
    params: GbtParams
        Hyperparameters.
    classes: Optional[Sequence]
        Declared classes. Defaults to the sorted distinct labels of ``y``.

    Raises
    ------------
    ValidationError
        Fewer than 2 classes occur in ``y``, a label is not declared or a feature is non-finite.
    """
    X = as_finite_matrix(X)
    y = np.asarray(y, dtype=object)
    if len(y) != len(X):
        raise ValidationError(f"{len(y)} labels given for {len(X)} rows")

    classes = tuple(sorted(set(y.tolist()))) if classes is None else tuple(classes)
    lookup = {label: code for code, label in enumerate(classes)}
    if unknown := set(y.tolist()) - set(lookup):
        raise ValidationError(f"Labels not among the declared classes: {sorted(map(str, unknown))}")
    if len(set(y.tolist())) < 2:
        raise ValidationError("Classification needs at least 2 classes present in the labels")

    codes = np.fromiter((lookup[label] for label in y), dtype=np.intp, count=len(y))
    n, K = len(X), len(classes)
    onehot = np.eye(K)[codes]
    base_score = np.full(K, 0.5)
    scores = np.tile(base_score, (n, 1))
    rng = np.random.default_rng(params.seed)
    trees, losses = [], []
    for _ in range(params.n_rounds):
        probabilities = softmax(scores, axis=1)
        gradient = probabilities - onehot
        hessian = np.maximum(2 * probabilities * (1 - probabilities), MIN_HESSIAN)
        rows = _round_rows(n, params, rng)
        round_trees = tuple(
            _TreeBuilder(X, gradient[:, c], hessian[:, c], params).build(rows) for c in range(K)
        )
        for c, tree in enumerate(round_trees):
            scores[:, c] += tree.predict(X)

        trees.append(round_trees)
        log_probabilities = log_softmax(scores, axis=1)
        losses.append(float(-log_probabilities[np.arange(n), codes].mean()))

    logger.debug("Trained classifier: %d rows, %d classes, final loss %.6g", n, K, losses[-1])
    return GbtModel("multiclass", tuple(trees), base_score, X.shape[1], classes, tuple(losses))


@doc_category("Prediction")
def train_regressor(X: Any, y: Sequence[float], params: GbtParams = GbtParams()) -> GbtModel:
    """
    Trains a squared-error boosting regressor. The base score is the mean target.

    Raises
    ------------
    ValidationError
        Fewer than 2 rows, or non-finite features or targets.
    """
    X = as_finite_matrix(X)
    y = np.asarray(y, dtype=float)
    if len(y) != len(X):
        raise ValidationError(f"{len(y)} targets given for {len(X)} rows")
    if len(y) < 2:
        raise ValidationError("Regression needs at least 2 rows")
    if not np.all(np.isfinite(y)):
        raise ValidationError("Regression target contains non-finite values")

    n = len(y)
    # a constant target is represented exactly
    base = float(y[0]) if np.all(y == y[0]) else float(np.mean(y))
    scores = np.full(n, base)
    hessian = np.ones(n)
    rng = np.random.default_rng(params.seed)
    trees, losses = [], []
    for _ in range(params.n_rounds):
        rows = _round_rows(n, params, rng)
        tree = _TreeBuilder(X, scores - y, hessian, params).build(rows)
        scores += tree.predict(X)
        trees.append((tree,))
        losses.append(float(np.mean((scores - y) ** 2)))

    logger.debug("Trained regressor: %d rows, final MSE %.6g", n, losses[-1])
    return GbtModel("regression", tuple(trees), np.array([base]), X.shape[1], None, tuple(losses))


@doc_category("Prediction")
def predict(model: GbtModel, X: Any) -> np.ndarray:
    """
    Predicts with a fitted ``model``. Same as :meth:`GbtModel.predict`.

    Raises
    ------------
    ValidationError
        The column count of ``X`` differs from the training data.
    """
    return model.predict(X)
