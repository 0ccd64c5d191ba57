"""
Module contains ComBat location / scale harmonization with parametric
empirical Bayes shrinkage of the site parameters.

The model of every feature ``f`` is::

    y[j, f] = alpha[f] + f_f(X[j]) + gamma[site(j), f] + delta[site(j), f] * eps[j, f]

The covariate part ``f_f`` is a least-squares fit of the covariate bases described
by :class:`CovariateModelSpec`.
"""
from __future__ import annotations
from typing import Dict, Iterable, Literal, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field
from abc import ABC, abstractmethod

import logging
import warnings

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline

from .dataset import Dataset
from .errors import (
    ConvergenceError,
    DegenerateStatisticError,
    SchemaError,
    SingularDesignError,
    UnseenSiteError,
    ValidationError,
)
from .pipeline import Transformer
from .doc import doc_category


__all__ = (
    "CovariateTerm",
    "CovariateModelSpec",
    "CovariateBasis",
    "LinearBasis",
    "QuadraticBasis",
    "SplineBasis",
    "OneHotBasis",
    "EbHyperparameters",
    "HarmonizationModel",
    "ComBatHarmonizer",
    "fit",
    "transform",
    "harmonize",
)


logger = logging.getLogger(__name__)

EB_TOLERANCE = 1e-6
EB_MAX_ITERATIONS = 200
SPLINE_DEGREE = 3
# Residual variance (relative to the feature's mean square) treated as zero
ZERO_VARIANCE_RTOL = 1e-12


BasisName = Literal["linear", "quadratic", "spline"]


@doc_category("Harmonization")
@dataclass(frozen=True)
class CovariateTerm:
    """
    A single covariate of the harmonization model.

    Parameters
    ------------
    name: str
        Covariate column.
    basis: Literal["linear", "quadratic", "spline"]
        Basis expansion of numeric covariates. Ignored for categorical
        covariates, which are always one-hot encoded.
    df: int
        Degrees of freedom of the spline basis (>= 3).
    """
    name: str
    basis: BasisName = "linear"
    df: int = 0

    def __post_init__(self):
        if self.basis not in ("linear", "quadratic", "spline"):
            raise ValidationError(f"Unknown basis '{self.basis}' for covariate '{self.name}'")

        if self.basis == "spline" and self.df < 3:
            raise ValidationError(f"Spline df of covariate '{self.name}' must be at least 3, got {self.df}")

    def __str__(self) -> str:
        if self.basis == "spline":
            return f"{self.name}:spline{self.df}"

        return f"{self.name}:{self.basis}"

    @classmethod
    def parse(cls, text: str) -> CovariateTerm:
        "Parses ``name``, ``name:linear``, ``name:quadratic`` or ``name:spline<df>``."
        name, _, basis = text.strip().partition(":")
        name, basis = name.strip(), basis.strip() or "linear"
        if not name:
            raise ValidationError(f"Empty covariate name in '{text}'")

        if basis.startswith("spline"):
            df = basis[len("spline"):] or "5"
            if not df.isdigit():
                raise ValidationError(f"Invalid spline degrees of freedom in '{text}'")

            return cls(name, "spline", int(df))

        return cls(name, basis)


@doc_category("Harmonization")
@dataclass(frozen=True)
class CovariateModelSpec:
    """
    Biological covariates preserved by the harmonization.

    Parameters
    ------------
    terms: Sequence[CovariateTerm]
        Covariate terms, every covariate at most once.

    Example
    -----------
    .. code-block:: python

        CovariateModelSpec.parse("age:spline5,sex")
        CovariateModelSpec([CovariateTerm("age", "quadratic")])
    """
    terms: Tuple[CovariateTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValidationError(f"Covariates listed more than once: {names}")

    def __str__(self) -> str:
        return ",".join(map(str, self.terms))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(t.name for t in self.terms)

    @classmethod
    def parse(cls, text: str) -> CovariateModelSpec:
        "Parses a comma separated list of terms (see :meth:`CovariateTerm.parse`)."
        return cls(tuple(CovariateTerm.parse(part) for part in text.split(",") if part.strip()))

    @classmethod
    def coerce(cls, value: Union[CovariateModelSpec, str, Iterable[CovariateTerm], None]) -> CovariateModelSpec:
        if value is None:
            return cls()
        if isinstance(value, CovariateModelSpec):
            return value
        if isinstance(value, str):
            return cls.parse(value)

        return cls(tuple(value))


@doc_category("Harmonization")
class CovariateBasis(ABC):
    """
    Fitted basis expansion of one covariate column.
    """
    column: str

    @property
    @abstractmethod
    def n_columns(self) -> int:
        "Number of design matrix columns the basis produces."

    @abstractmethod
    def design(self, values: np.ndarray) -> np.ndarray:
        """
        Evaluates the basis.

        Returns
        ----------
        numpy.ndarray
            Matrix of shape (len(values), :attr:`n_columns`).
        """


@doc_category("Harmonization")
@dataclass(frozen=True)
class LinearBasis(CovariateBasis):
    "Identity basis of a numeric covariate."
    column: str

    @property
    def n_columns(self) -> int:
        return 1

    def design(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float).reshape(-1, 1)


@doc_category("Harmonization")
@dataclass(frozen=True)
class QuadraticBasis(CovariateBasis):
    """
    ``(x - center, (x - center) ** 2)`` with the center at the training mean.
    """
    column: str
    center: float

    @property
    def n_columns(self) -> int:
        return 2

    def design(self, values: np.ndarray) -> np.ndarray:
        centered = np.asarray(values, dtype=float) - self.center
        return np.column_stack((centered, centered ** 2))


@doc_category("Harmonization")
@dataclass(frozen=True)
class SplineBasis(CovariateBasis):
    """
    Cubic B-spline basis without its first column.

    Beyond the boundary knots every basis function continues linearly
    from its boundary value and derivative.

    Parameters
    ------------
    column: str
        Covariate column.
    knots: Sequence[float]
        Full knot vector, boundary knots repeated ``degree + 1`` times.
    degree: int
        Spline degree.
    """
    column: str
    knots: Tuple[float, ...]
    degree: int = SPLINE_DEGREE

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if len(self.knots) < 2 * (self.degree + 1):
            raise ValidationError(f"Spline of '{self.column}' needs at least {2 * (self.degree + 1)} knots")

    @property
    def n_columns(self) -> int:
        return len(self.knots) - self.degree - 2

    @property
    def boundary(self) -> Tuple[float, float]:
        return self.knots[self.degree], self.knots[-self.degree - 1]

    @classmethod
    def from_training(cls, column: str, values: np.ndarray, df: int) -> SplineBasis:
        """
        Places ``df - 3`` interior knots at equally spaced quantiles of ``values``.
        """
        values = np.asarray(values, dtype=float)
        lo, hi = float(values.min()), float(values.max())
        if not lo < hi:
            raise SingularDesignError(f"Covariate '{column}' is constant, a spline basis cannot be fitted")

        probabilities = np.linspace(0, 1, df - SPLINE_DEGREE + 2)[1:-1]
        interior = np.unique(np.quantile(values, probabilities))
        interior = interior[(interior > lo) & (interior < hi)]
        if len(interior) < len(probabilities):
            warnings.warn(
                f"Covariate '{column}' has too few distinct values for {len(probabilities)} interior knots, "
                f"using {len(interior)}."
            )

        boundary = SPLINE_DEGREE + 1
        return cls(column, (*[lo] * boundary, *interior, *[hi] * boundary))

    def design(self, values: np.ndarray) -> np.ndarray:
        x = np.asarray(values, dtype=float)
        knots = np.asarray(self.knots)
        lo, hi = self.boundary
        basis = BSpline.design_matrix(np.clip(x, lo, hi), knots, self.degree).toarray()

        below, above = x < lo, x > hi
        if below.any() or above.any():
            n_basis = len(knots) - self.degree - 1
            slope = BSpline(knots, np.eye(n_basis), self.degree).derivative()
            basis[below] += np.outer(x[below] - lo, slope(lo))
            basis[above] += np.outer(x[above] - hi, slope(hi))

        return basis[:, 1:]


@doc_category("Harmonization")
@dataclass(frozen=True)
class OneHotBasis(CovariateBasis):
    """
    Treatment coding of a categorical covariate, first level as the reference.
    """
    column: str
    levels: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(map(str, self.levels)))

    @property
    def n_columns(self) -> int:
        return len(self.levels) - 1

    def design(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values).astype(str)
        if unknown := set(values) - set(self.levels):
            raise ValidationError(
                f"Covariate '{self.column}' has levels not seen during fit: {', '.join(sorted(unknown))}"
            )

        return (values[:, None] == np.asarray(self.levels[1:], dtype=str)[None, :]).astype(float)


def _fit_basis(term: CovariateTerm, data: Dataset) -> CovariateBasis:
    values = data.column(term.name)
    if term.name in data.categorical:
        if term.basis != "linear":
            raise SchemaError(f"Categorical covariate '{term.name}' cannot use a {term.basis} basis")

        return OneHotBasis(term.name, tuple(sorted(set(values))))

    if term.basis == "quadratic":
        return QuadraticBasis(term.name, float(np.mean(values)))

    if term.basis == "spline":
        return SplineBasis.from_training(term.name, values, term.df)

    return LinearBasis(term.name)


def _covariate_design(bases: Sequence[CovariateBasis], covariates: pd.DataFrame) -> np.ndarray:
    if missing := [b.column for b in bases if b.column not in covariates.columns]:
        raise SchemaError(f"Missing covariate column(s): {', '.join(missing)}")

    blocks = [basis.design(covariates[basis.column].to_numpy()) for basis in bases]
    return np.hstack([np.empty((len(covariates), 0)), *blocks])


@doc_category("Harmonization")
@dataclass(frozen=True)
class EbHyperparameters:
    """
    Per-site prior hyperparameters, estimated across features by the method of moments.

    Parameters
    ------------
    location_mean: numpy.ndarray
        Normal prior mean of the location parameters, one per site.
    location_variance: numpy.ndarray
        Normal prior variance of the location parameters.
    scale_shape: numpy.ndarray
        Inverse-gamma prior shape of the squared scale parameters.
        NaN when the site's squared scales did not vary across features (no scale shrinkage).
    scale_scale: numpy.ndarray
        Inverse-gamma prior scale of the squared scale parameters.
    iterations: Sequence[int]
        Fixed point iterations used per site.
    """
    location_mean: np.ndarray
    location_variance: np.ndarray
    scale_shape: np.ndarray
    scale_scale: np.ndarray
    iterations: Tuple[int, ...]

    def __post_init__(self):
        for name in ("location_mean", "location_variance", "scale_shape", "scale_scale"):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

        object.__setattr__(self, "iterations", tuple(map(int, self.iterations)))

    @property
    def scale_prior_mean(self) -> np.ndarray:
        "Mean of the inverse-gamma prior of the squared scale."
        return self.scale_scale / (self.scale_shape - 1)


@doc_category("Harmonization")
@dataclass(frozen=True, eq=False)
class HarmonizationModel:
    """
    Fitted, immutable harmonization model. Create it with :func:`fit`.

    Parameters
    ------------
    feature_names: Sequence[str]
        Names of the V harmonized features.
    site_registry: Sequence[str]
        The k sites seen during fit, indexing the rows of the site matrices.
    covariates: CovariateModelSpec
        The covariate model.
    bases: Sequence[CovariateBasis]
        Fitted covariate bases (one per term).
    covariate_coefficients: numpy.ndarray
        Coefficients of the covariate design, shape (p, V).
    grand_means: numpy.ndarray
        Site size weighted intercepts, shape (V,).
    pooled_scale: numpy.ndarray
        Pooled residual standard deviations, shape (V,).
    site_location: numpy.ndarray
        Location parameters of the standardized data, shape (k, V).
    site_scale: numpy.ndarray
        Multiplicative scale parameters of the standardized data, shape (k, V).
    site_sizes: Sequence[int]
        Number of training subjects per site.
    eb_enabled: bool
        Whether the site parameters were shrunk with empirical Bayes.
    eb_hyperparams: Optional[EbHyperparameters]
        The priors, when ``eb_enabled``.
    """
    feature_names: Tuple[str, ...]
    site_registry: Tuple[str, ...]
    covariates: CovariateModelSpec
    bases: Tuple[CovariateBasis, ...]
    covariate_coefficients: np.ndarray
    grand_means: np.ndarray
    pooled_scale: np.ndarray
    site_location: np.ndarray
    site_scale: np.ndarray
    site_sizes: Tuple[int, ...]
    eb_enabled: bool = False
    eb_hyperparams: Optional[EbHyperparameters] = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "feature_names", tuple(map(str, self.feature_names)))
        set_(self, "site_registry", tuple(map(str, self.site_registry)))
        set_(self, "bases", tuple(self.bases))
        set_(self, "site_sizes", tuple(map(int, self.site_sizes)))
        set_(self, "eb_enabled", bool(self.eb_enabled))
        k, V = len(self.site_registry), len(self.feature_names)
        p = sum(b.n_columns for b in self.bases)
        shapes = {
            "covariate_coefficients": (p, V),
            "grand_means": (V,),
            "pooled_scale": (V,),
            "site_location": (k, V),
            "site_scale": (k, V),
        }
        for name, shape in shapes.items():
            array = np.array(getattr(self, name), dtype=float)
            if array.size != np.prod(shape):
                raise ValidationError(f"{name} has shape {array.shape}, expected {shape}")

            array = array.reshape(shape)
            array.setflags(write=False)
            set_(self, name, array)

        if len(self.site_sizes) != k:
            raise ValidationError(f"{len(self.site_sizes)} site sizes given for {k} sites")
        if not np.all(self.site_scale > 0) or not np.all(self.pooled_scale > 0):
            raise ValidationError("Scale parameters must be positive")
        if self.eb_enabled and self.eb_hyperparams is None:
            raise ValidationError("An empirical Bayes model needs its hyperparameters")

    @property
    def basis_knots(self) -> Dict[str, Tuple[float, ...]]:
        "Knot vectors of the spline bases, by covariate."
        return {b.column: b.knots for b in self.bases if isinstance(b, SplineBasis)}

    def covariate_design(self, data: Dataset) -> np.ndarray:
        "Evaluates the stored covariate bases on ``data``."
        return _covariate_design(self.bases, data.covariates)

    def transform(self, data: Dataset) -> np.ndarray:
        """
        Harmonizes the features of ``data`` with the stored parameters.

        Every output row only depends on the same input row, no parameter is updated.

        Raises
        ----------
        SchemaError
            Feature names differ from the fitted ones or a covariate is missing.
        UnseenSiteError
            ``data`` contains a site that was not part of the training data.
        """
        if tuple(data.feature_names) != self.feature_names:
            raise SchemaError(
                f"Feature names do not match the model (expected {list(self.feature_names)}, "
                f"got {list(data.feature_names)})"
            )

        lookup = {site: i for i, site in enumerate(self.site_registry)}
        if unseen := set(data.sites) - set(lookup):
            raise UnseenSiteError(unseen)

        codes = np.fromiter((lookup[s] for s in data.sites), dtype=np.intp, count=data.n)
        design = self.covariate_design(data)

        # column by column, so each row's result does not depend on the batch it is in
        fitted = np.broadcast_to(self.grand_means, data.features.shape).copy()
        for column, coefficients in zip(design.T, self.covariate_coefficients):
            fitted += column[:, None] * coefficients

        standardized = (data.features - fitted) / self.pooled_scale
        adjusted = (standardized - self.site_location[codes]) / self.site_scale[codes]
        return adjusted * self.pooled_scale + fitted


def _eb_site(
    standardized: np.ndarray,
    gamma_hat: np.ndarray,
    delta2_hat: np.ndarray,
    site: str,
) -> Tuple[np.ndarray, np.ndarray, Tuple[float, float, float, float, int]]:
    n_i = standardized.shape[0]
    gamma_bar = gamma_hat.mean()
    tau2 = gamma_hat.var(ddof=1)
    mean, var = delta2_hat.mean(), delta2_hat.var(ddof=1)
    if var > 0:
        shape = (2 * var + mean ** 2) / var
        scale = (mean * var + mean ** 3) / var
    else:
        logger.warning("Squared scales of site %s do not vary across features, scale is not shrunk", site)
        shape = scale = np.nan

    gamma_old, delta2_old = gamma_hat, delta2_hat
    for iteration in range(1, EB_MAX_ITERATIONS + 1):
        gamma_new = (tau2 * n_i * gamma_hat + delta2_old * gamma_bar) / (tau2 * n_i + delta2_old)
        if var > 0:
            sum2 = ((standardized - gamma_new) ** 2).sum(axis=0)
            delta2_new = (scale + 0.5 * sum2) / (n_i / 2 + shape - 1)
        else:
            delta2_new = delta2_hat

        change = max(np.abs(gamma_new - gamma_old).max(), np.abs(delta2_new - delta2_old).max())
        gamma_old, delta2_old = gamma_new, delta2_new
        if change < EB_TOLERANCE:
            logger.debug("EB of site %s converged after %d iterations", site, iteration)
            return gamma_new, delta2_new, (gamma_bar, tau2, shape, scale, iteration)

    raise ConvergenceError(
        f"Empirical Bayes estimates of site {site} did not converge in {EB_MAX_ITERATIONS} iterations"
    )


@doc_category("Harmonization")
def fit(
    train: Dataset,
    covariates: Union[CovariateModelSpec, str, None] = None,
    eb: bool = True,
) -> HarmonizationModel:
    """
    Fits a harmonization model to ``train``.

    Per feature, the grand mean, covariate effects and site effects are fitted by least
    squares, the data is standardized with the pooled residual standard deviation and
    the per-site location and scale of the standardized data is estimated. With ``eb``,
    the site estimates are shrunk towards priors shared by all the features.

    Parameters
    ------------
    train: Dataset
        Training data. Every site needs at least 2 subjects.
    covariates: CovariateModelSpec | str | None
        Covariates whose effects are preserved, e.g. ``"age:spline5,sex"``.
    eb: bool
        Use empirical Bayes. Needs at least 2 sites and 2 features, otherwise
        it is skipped with a warning.

    Raises
    ------------
    ValidationError
        A site has a single subject.
    SchemaError
        A covariate column is missing.
    SingularDesignError
        The design matrix is rank deficient.
    ConvergenceError
        The empirical Bayes iteration did not converge.
    """
    spec = CovariateModelSpec.coerce(covariates)
    if missing := [name for name in spec.names if name not in train.covariates.columns]:
        raise SchemaError(f"Missing covariate column(s): {', '.join(missing)}")

    present = set(train.sites)
    registry = tuple(s for s in train.site_registry if s in present)
    lookup = {site: i for i, site in enumerate(registry)}
    codes = np.fromiter((lookup[s] for s in train.sites), dtype=np.intp, count=train.n)
    k, V, n = len(registry), train.n_features, train.n
    sizes = np.bincount(codes, minlength=k)
    if small := [registry[i] for i in np.nonzero(sizes < 2)[0]]:
        raise ValidationError(f"Site(s) with fewer than 2 subjects: {', '.join(small)}")

    bases = tuple(_fit_basis(term, train) for term in spec.terms)
    covariate_design = _covariate_design(bases, train.covariates)
    design = np.hstack((np.eye(k)[codes], covariate_design))
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularDesignError(
            f"Design of {k} sites and covariates {list(spec.names)} is rank deficient "
            f"({design.shape[1]} columns, {n} rows)"
        )

    y = train.features
    coefficients, *_ = np.linalg.lstsq(design, y, rcond=None)
    grand_means = (sizes / n) @ coefficients[:k]
    covariate_coefficients = coefficients[k:]
    variance = np.mean((y - design @ coefficients) ** 2, axis=0)

    constant = variance <= ZERO_VARIANCE_RTOL * np.maximum(1.0, np.mean(y ** 2, axis=0))
    for name in np.asarray(train.feature_names)[constant]:
        logger.warning("Feature %s has no residual variance and is passed through unchanged", name)

    active = ~constant
    pooled_scale = np.where(active, np.sqrt(np.where(active, variance, 1.0)), 1.0)
    standardized = (y - grand_means - covariate_design @ covariate_coefficients) / pooled_scale
    standardized = standardized[:, active]

    gamma_hat = np.vstack([standardized[codes == i].mean(axis=0) for i in range(k)])
    delta2_hat = np.vstack([standardized[codes == i].var(axis=0) for i in range(k)])
    if np.any(zero := delta2_hat <= 0):
        site, feature = np.argwhere(zero)[0]
        raise DegenerateStatisticError(
            f"Site {registry[site]} has no variance in feature {np.asarray(train.feature_names)[active][feature]}"
        )

    use_eb = eb and k >= 2 and int(active.sum()) >= 2
    if eb and not use_eb:
        logger.warning("Empirical Bayes needs at least 2 sites and 2 features (k=%d, V=%d), skipping it", k, int(active.sum()))

    hyperparameters = None
    gamma_star, delta2_star = gamma_hat, delta2_hat
    if use_eb:
        results = [
            _eb_site(standardized[codes == i], gamma_hat[i], delta2_hat[i], registry[i])
            for i in range(k)
        ]
        gamma_star = np.vstack([r[0] for r in results])
        delta2_star = np.vstack([r[1] for r in results])
        priors = np.array([r[2] for r in results])
        hyperparameters = EbHyperparameters(*priors[:, :4].T, iterations=priors[:, 4].astype(int))

    site_location = np.zeros((k, V))
    site_scale = np.ones((k, V))
    site_location[:, active] = gamma_star
    site_scale[:, active] = np.sqrt(delta2_star)
    logger.debug("Fitted harmonization model: n=%d, V=%d, k=%d, eb=%s", n, V, k, use_eb)
    return HarmonizationModel(
        feature_names=train.feature_names,
        site_registry=registry,
        covariates=spec,
        bases=bases,
        covariate_coefficients=covariate_coefficients,
        grand_means=grand_means,
        pooled_scale=pooled_scale,
        site_location=site_location,
        site_scale=site_scale,
        site_sizes=sizes,
        eb_enabled=use_eb,
        eb_hyperparams=hyperparameters,
    )


@doc_category("Harmonization")
def transform(model: HarmonizationModel, data: Dataset) -> np.ndarray:
    """
    Harmonizes ``data`` with a fitted ``model``. Same as :meth:`HarmonizationModel.transform`.
    """
    return model.transform(data)


@doc_category("Harmonization")
def harmonize(
    data: Dataset,
    covariates: Union[CovariateModelSpec, str, None] = None,
    eb: bool = True,
) -> Dataset:
    """
    Fits a model to the whole of ``data`` and returns ``data`` with harmonized features.

    The result equals the harmonized training output of :func:`fit`.
    """
    model = fit(data, covariates, eb)
    return data.with_features(model.transform(data))


@doc_category("Harmonization")
@dataclass(frozen=True)
class ComBatHarmonizer(Transformer):
    """
    Pipeline transformer wrapping :func:`fit` and :meth:`HarmonizationModel.transform`.

    Parameters
    ------------
    covariates: CovariateModelSpec | str | None
        Covariates whose effects are preserved.
    eb: bool
        Use empirical Bayes shrinkage.
    """
    covariates: CovariateModelSpec = field(default_factory=CovariateModelSpec)
    eb: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariates", CovariateModelSpec.coerce(self.covariates))

    def fit(self, data: Dataset) -> HarmonizationModel:
        return fit(data, self.covariates, self.eb)

    def transform(self, state: HarmonizationModel, data: Dataset) -> Dataset:
        return data.with_features(state.transform(data))
