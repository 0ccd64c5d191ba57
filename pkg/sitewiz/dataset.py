"""
Module contains the tabular data model of multi-site feature datasets,
CSV ingestion / export and deterministic splitting.
"""
from __future__ import annotations
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field
from pathlib import Path

import logging
import os

import numpy as np
import pandas as pd

from .errors import SchemaError, StratificationError, ValidationError
from .doc import doc_category


__all__ = (
    "Dataset",
    "FeatureSchema",
    "MetaDatasetSpec",
    "META_DATASETS",
    "load_feature_table",
    "write_feature_table",
    "split_holdout",
    "select_meta_dataset",
)


logger = logging.getLogger(__name__)

SITE_COLUMN = "site"
SUBJECT_COLUMN = "subject_id"
DEFAULT_COVARIATES = ("age", "sex")
DEFAULT_CATEGORICAL = ("sex",)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@doc_category("Data")
@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable multi-site feature dataset.

    Parameters
    ------------
    subject_ids: Sequence[str]
        Opaque subject identifiers. Only used for reporting and bookkeeping.
    features: numpy.ndarray
        Feature matrix of shape (n, V).
    feature_names: Sequence[str]
        Names of the V feature columns.
    sites: Sequence[str]
        Site label of every subject.
    covariates: pandas.DataFrame
        Biological covariates, one row per subject (may have zero columns).
    site_registry: Optional[Sequence[str]]
        Ordered distinct site names. Defaults to the sorted distinct ``sites``.
    categorical: Iterable[str]
        Names of covariate columns that hold categories.
    """
    subject_ids: Tuple[str, ...]
    features: np.ndarray
    feature_names: Tuple[str, ...]
    sites: np.ndarray
    covariates: pd.DataFrame
    site_registry: Tuple[str, ...] = None
    categorical: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        set_ = object.__setattr__
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise ValidationError(f"Feature matrix must be 2D, got shape {features.shape}")

        n, n_features = features.shape
        sites = np.asarray([str(s) for s in self.sites], dtype=object)
        subject_ids = tuple(str(s) for s in self.subject_ids)
        feature_names = tuple(str(f) for f in self.feature_names)
        covariates = pd.DataFrame(self.covariates).reset_index(drop=True).copy()
        if self.site_registry is None:
            registry = tuple(sorted(set(sites)))
        else:
            registry = tuple(str(s) for s in self.site_registry)

        if n_features < 1:
            raise SchemaError("A dataset needs at least one feature column")
        if len(feature_names) != n_features:
            raise SchemaError(f"{len(feature_names)} feature names given for {n_features} feature columns")
        if len(set(feature_names)) != n_features:
            raise SchemaError("Feature names must be unique")
        if len(sites) != n or len(subject_ids) != n or len(covariates) != n:
            raise ValidationError(
                f"Row counts differ: features={n}, sites={len(sites)}, "
                f"subject_ids={len(subject_ids)}, covariates={len(covariates)}"
            )
        if len(set(subject_ids)) != n:
            raise ValidationError("Duplicate subject ids")
        if len(registry) < 1 or len(set(registry)) != len(registry):
            raise ValidationError("The site registry must hold at least one site and no duplicates")
        if unknown := set(sites) - set(registry):
            raise ValidationError(f"Sites missing from the site registry: {', '.join(sorted(unknown))}")
        if not np.all(np.isfinite(features)):
            rows = np.unique(np.nonzero(~np.isfinite(features))[0])
            raise ValidationError("Feature matrix has missing values", [(int(r), None, "missing feature") for r in rows])

        categorical = frozenset(self.categorical)
        if unknown := categorical - set(covariates.columns):
            raise SchemaError(f"Categorical columns not among covariates: {', '.join(sorted(unknown))}")

        for column in covariates.columns:
            if column in categorical:
                covariates[column] = covariates[column].astype(str)
            else:
                covariates[column] = covariates[column].astype(float)
                if not np.all(np.isfinite(covariates[column].to_numpy())):
                    raise ValidationError(f"Covariate '{column}' has missing values")

        set_(self, "features", _readonly(features))
        set_(self, "sites", _readonly(sites))
        set_(self, "subject_ids", subject_ids)
        set_(self, "feature_names", feature_names)
        set_(self, "covariates", covariates)
        set_(self, "site_registry", registry)
        set_(self, "categorical", categorical)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __repr__(self) -> str:
        return (
            f"Dataset(n={self.n}, V={self.n_features}, k={self.k}, "
            f"covariates={list(self.covariates.columns)})"
        )

    @property
    def n(self) -> int:
        "Number of subjects."
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        "Number of features (V)."
        return self.features.shape[1]

    @property
    def k(self) -> int:
        "Number of registered sites."
        return len(self.site_registry)

    @property
    def site_codes(self) -> np.ndarray:
        "Integer code of every subject's site, indexing :attr:`site_registry`."
        lookup = {site: i for i, site in enumerate(self.site_registry)}
        return np.fromiter((lookup[s] for s in self.sites), dtype=np.intp, count=self.n)

    def column(self, name: str) -> np.ndarray:
        """
        Returns the values of the site column (``"site"``) or of a covariate column.
        """
        if name == SITE_COLUMN:
            return self.sites

        if name not in self.covariates.columns:
            raise SchemaError(f"Column '{name}' does not exist (covariates: {list(self.covariates.columns)})")

        return self.covariates[name].to_numpy()

    def subset(self, indices: Sequence[int], shrink_registry: bool = True) -> Dataset:
        """
        Returns a new dataset with the rows at ``indices`` (in the given order).

        Parameters
        ------------
        indices: Sequence[int]
            Row indices.
        shrink_registry: bool
            Keep only the sites still present in the registry (registry order is preserved).
        """
        indices = np.asarray(indices, dtype=np.intp)
        sites = self.sites[indices]
        registry = self.site_registry
        if shrink_registry:
            present = set(sites)
            registry = tuple(s for s in registry if s in present)

        if not registry:
            raise ValidationError("Subset is empty")

        return Dataset(
            subject_ids=[self.subject_ids[i] for i in indices],
            features=self.features[indices],
            feature_names=self.feature_names,
            sites=sites,
            covariates=self.covariates.iloc[indices],
            site_registry=registry,
            categorical=self.categorical,
        )

    def with_features(self, features: np.ndarray, feature_names: Optional[Sequence[str]] = None) -> Dataset:
        """
        Returns a copy with the feature matrix replaced. Sites and covariates pass through untouched.
        """
        return Dataset(
            subject_ids=self.subject_ids,
            features=features,
            feature_names=self.feature_names if feature_names is None else feature_names,
            sites=self.sites,
            covariates=self.covariates,
            site_registry=self.site_registry,
            categorical=self.categorical,
        )

    @classmethod
    def concat(cls, datasets: Sequence[Dataset]) -> Dataset:
        """
        Concatenates datasets with identical feature names and covariate columns.
        The site registry is the union in first-seen order.
        """
        first = datasets[0]
        registry: Dict[str, None] = {}
        for dataset in datasets:
            if dataset.feature_names != first.feature_names:
                raise SchemaError("Cannot concatenate datasets with different features")
            if list(dataset.covariates.columns) != list(first.covariates.columns):
                raise SchemaError("Cannot concatenate datasets with different covariates")
            registry.update(dict.fromkeys(dataset.site_registry))

        return cls(
            subject_ids=[s for d in datasets for s in d.subject_ids],
            features=np.vstack([d.features for d in datasets]),
            feature_names=first.feature_names,
            sites=np.concatenate([d.sites for d in datasets]),
            covariates=pd.concat([d.covariates for d in datasets], ignore_index=True),
            site_registry=tuple(registry),
            categorical=first.categorical,
        )


@doc_category("Data")
@dataclass(frozen=True)
class FeatureSchema:
    """
    Column-role mapping of a feature table.

    Parameters
    ------------
    feature_columns: Sequence[str]
        Feature columns (at least one).
    covariate_columns: Sequence[str]
        Covariate columns (may be empty).
    site_column: str
        The site column. Defaults to ``"site"``.
    subject_column: str
        The subject id column. Defaults to ``"subject_id"``.
    categorical_columns: Sequence[str]
        Covariates holding categories. Defaults to ``("sex",)`` when ``sex`` is a covariate.
    """
    feature_columns: Tuple[str, ...]
    covariate_columns: Tuple[str, ...] = ()
    site_column: str = SITE_COLUMN
    subject_column: str = SUBJECT_COLUMN
    categorical_columns: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        if self.categorical_columns is None:
            categorical = tuple(c for c in DEFAULT_CATEGORICAL if c in self.covariate_columns)
        else:
            categorical = tuple(self.categorical_columns)

        object.__setattr__(self, "categorical_columns", categorical)
        if not self.feature_columns:
            raise SchemaError("The schema names no feature columns")

        roles = [self.subject_column, self.site_column, *self.covariate_columns, *self.feature_columns]
        if len(set(roles)) != len(roles):
            raise SchemaError("A column is mapped to more than one role")

        if unknown := set(categorical) - set(self.covariate_columns):
            raise SchemaError(f"Categorical columns are not covariates: {', '.join(sorted(unknown))}")

    @property
    def columns(self) -> Tuple[str, ...]:
        "All mapped columns in output order."
        return (self.subject_column, self.site_column, *self.covariate_columns, *self.feature_columns)

    @classmethod
    def infer(cls, header: Sequence[str], covariates: Iterable[str] = DEFAULT_COVARIATES) -> FeatureSchema:
        """
        Infers the schema from a header: ``subject_id`` and ``site`` columns,
        the listed ``covariates`` that are present, every other column is a feature.
        """
        header = list(header)
        missing = [c for c in (SUBJECT_COLUMN, SITE_COLUMN) if c not in header]
        if missing:
            raise SchemaError(f"Header lacks required column(s): {', '.join(missing)}")

        covariates = tuple(c for c in covariates if c in header)
        features = tuple(c for c in header if c not in (SUBJECT_COLUMN, SITE_COLUMN, *covariates))
        return cls(feature_columns=features, covariate_columns=covariates)


def _parse_numeric(values: np.ndarray, column: str, issues: list) -> np.ndarray:
    try:
        parsed = np.asarray(values, dtype=float)
    except ValueError:
        parsed = np.empty(len(values))
        for row, text in enumerate(values):
            try:
                parsed[row] = float(text)
            except ValueError:
                parsed[row] = np.nan
                if text.strip():
                    issues.append((row, column, f"unparseable number '{text}'"))

    for row in np.nonzero(~np.isfinite(parsed))[0]:
        if not any(i[0] == row and i[1] == column for i in issues):
            issues.append((int(row), column, "missing value"))

    return parsed


@doc_category("Data")
def load_feature_table(path: Union[str, os.PathLike], schema: Optional[FeatureSchema] = None) -> Dataset:
    """
    Loads a CSV feature table (header row, decimal point, UTF-8, LF or CRLF).

    Parameters
    ------------
    path: str | os.PathLike
        Path to the CSV file.
    schema: Optional[FeatureSchema]
        Column roles. Inferred from the header with :meth:`FeatureSchema.infer` when omitted.

    Raises
    ------------
    FileNotFoundError
        The file does not exist.
    SchemaError
        Mapped columns are missing, or no feature column is given.
    ValidationError
        Missing or unparseable cells (listed per row and column) or duplicate subject ids.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Feature table '{path}' does not exist")

    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    table.columns = [c.strip() for c in table.columns]
    if schema is None:
        schema = FeatureSchema.infer(table.columns)

    if missing := [c for c in schema.columns if c not in table.columns]:
        raise SchemaError(f"Columns missing from '{path.name}': {', '.join(missing)}")

    issues = []
    for column in (schema.subject_column, schema.site_column, *schema.categorical_columns):
        for row in np.nonzero(table[column].str.strip().to_numpy() == "")[0]:
            issues.append((int(row), column, "missing value"))

    numeric_covariates = [c for c in schema.covariate_columns if c not in schema.categorical_columns]
    parsed = {c: _parse_numeric(table[c].to_numpy(), c, issues) for c in (*numeric_covariates, *schema.feature_columns)}

    subject_ids = table[schema.subject_column].str.strip()
    duplicated = subject_ids[subject_ids.duplicated(keep="first")]
    for row, subject in duplicated.items():
        issues.append((int(row), schema.subject_column, f"duplicate subject id '{subject}'"))

    if issues:
        issues.sort(key=lambda i: (i[0], schema.columns.index(i[1])))
        raise ValidationError(f"Feature table '{path.name}' has invalid rows", issues)

    covariates = pd.DataFrame(
        {
            c: parsed[c] if c in parsed else table[c].str.strip().to_numpy()
            for c in schema.covariate_columns
        },
        index=range(len(table)),
    )
    dataset = Dataset(
        subject_ids=subject_ids.tolist(),
        features=np.column_stack([parsed[c] for c in schema.feature_columns]) if len(table) else np.empty((0, len(schema.feature_columns))),
        feature_names=schema.feature_columns,
        sites=table[schema.site_column].str.strip().to_numpy(),
        covariates=covariates,
        categorical=schema.categorical_columns,
    )
    logger.info("Loaded %s: n=%d, V=%d, k=%d", path.name, dataset.n, dataset.n_features, dataset.k)
    return dataset


@doc_category("Data")
def write_feature_table(dataset: Dataset, path: Union[str, os.PathLike]):
    """
    Writes ``dataset`` as CSV in the ``subject_id,site,<covariates>,<features>`` layout,
    LF line endings and 17 significant digits, so :func:`load_feature_table` reproduces
    every value exactly.
    """
    frame = pd.DataFrame({SUBJECT_COLUMN: list(dataset.subject_ids), SITE_COLUMN: list(dataset.sites)})
    for column in dataset.covariates.columns:
        frame[column] = dataset.covariates[column].to_numpy()

    for i, name in enumerate(dataset.feature_names):
        frame[name] = dataset.features[:, i]

    frame.to_csv(Path(path), index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")


@doc_category("Data")
def split_holdout(dataset: Dataset, fraction: float, stratify_by: str, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Randomly splits ``dataset`` into two parts, stratified by ``stratify_by``.

    Every stratum places ``round(fraction * size)`` rows (at least 1, at most size - 1)
    in the first part and the rest in the second. Rows keep their original order.

    Parameters
    ------------
    dataset: Dataset
        The dataset to split.
    fraction: float
        Proportion of each stratum going to the first part, 0 < fraction < 1.
    stratify_by: str
        ``"site"`` or a covariate column.
    seed: int
        Random seed.

    Raises
    ------------
    StratificationError
        A stratum has fewer than 2 rows.
    """
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")

    labels = np.asarray(dataset.column(stratify_by)).astype(str)
    rng = np.random.default_rng(seed)
    first: List[np.ndarray] = []
    for stratum in sorted(set(labels)):
        members = np.nonzero(labels == stratum)[0]
        if len(members) < 2:
            raise StratificationError(
                f"Stratum '{stratum}' of '{stratify_by}' has {len(members)} row(s), at least 2 are needed"
            )

        take = int(np.clip(np.floor(fraction * len(members) + 0.5), 1, len(members) - 1))
        first.append(rng.permutation(members)[:take])

    mask = np.zeros(dataset.n, dtype=bool)
    mask[np.concatenate(first)] = True
    return dataset.subset(np.nonzero(mask)[0]), dataset.subset(np.nonzero(~mask)[0])


@doc_category("Data")
@dataclass(frozen=True)
class MetaDatasetSpec:
    """
    Definition of a meta-dataset: a pool of single-site datasets within an age range.

    Parameters
    ------------
    name: str
        Meta-dataset name.
    age_min: float
        Minimal age (inclusive), in years.
    age_max: float
        Maximal age (inclusive), in years.
    included_sites: Sequence[str]
        Sites that belong to the meta-dataset.
    """
    name: str
    age_min: float
    age_max: float
    included_sites: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "included_sites", tuple(self.included_sites))
        if not self.age_min < self.age_max:
            raise ValidationError(f"{self.name}: age_min ({self.age_min}) must be below age_max ({self.age_max})")
        if not self.included_sites:
            raise ValidationError(f"{self.name}: no sites included")


@doc_category("Data")
def select_meta_dataset(dataset: Dataset, spec: MetaDatasetSpec, age_column: str = "age") -> Dataset:
    """
    Returns the rows of ``dataset`` with ``age_min <= age <= age_max`` whose site belongs to the
    meta-dataset. The site registry shrinks to the sites actually present.
    """
    age = np.asarray(dataset.column(age_column), dtype=float)
    included = np.isin(dataset.sites.astype(str), list(spec.included_sites))
    rows = np.nonzero(included & (age >= spec.age_min) & (age <= spec.age_max))[0]
    if not len(rows):
        raise ValidationError(f"Meta-dataset {spec.name} selects no rows")

    return dataset.subset(rows)


_CHILDHOOD_SITES = (
    "ABIDEI-KKI", "ABIDEI-OHSU", "ABIDEI-STANFORD", "ABIDEII-EMC_1", "ABIDEII-GU_1", "ABIDEII-KKI_32ch",
    "ABIDEII-KKI_8ch", "ABIDEII-NYU_1", "ABIDEII-OHSU_1", "ABIDEII-UCLA_1", "NKI2",
)
_ADOLESCENCE_SITES = (
    "ABIDEI-LEUVEN", "ABIDEI-NYU", "ABIDEI-OLIN", "ABIDEI-PITT", "ABIDEI-SDSU", "ABIDEI-TRINITY",
    "ABIDEI-UCLA", "ABIDEII-SDSU_1", "ABIDEII-TCD_1",
)
_ADULTHOOD_SITES = (
    "ABIDEI-CALTECH", "ABIDEI-MAX_MUN", "ABIDEI-SBL", "ABIDEII-BNI_1", "ABIDEII-ETH_1", "ABIDEII-IP_1",
    "ABIDEII-IU_1", "ABIDEII-USM_1", "ICBM", "IXI-Guys", "IXI-HH", "IXI-IOP",
)
# Sites only part of the whole-lifespan pool
_LIFESPAN_ONLY_SITES = ("ABIDEI-CMU", "ABIDEI-UM", "ABIDEI-USM", "ABIDEII-UCD_1")


META_DATASETS: Mapping[str, MetaDatasetSpec] = {
    "CHILDHOOD": MetaDatasetSpec("CHILDHOOD", 5, 13, _CHILDHOOD_SITES),
    "ADOLESCENCE": MetaDatasetSpec("ADOLESCENCE", 11, 20, _ADOLESCENCE_SITES),
    "ADULTHOOD": MetaDatasetSpec("ADULTHOOD", 18, 87, _ADULTHOOD_SITES),
    "LIFESPAN": MetaDatasetSpec(
        "LIFESPAN", 5, 87,
        tuple(sorted(_CHILDHOOD_SITES + _ADOLESCENCE_SITES + _ADULTHOOD_SITES + _LIFESPAN_ONLY_SITES))
    ),
}
