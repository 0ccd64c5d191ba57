from collections import Counter

import numpy as np
import pytest

from sitewiz import (
    META_DATASETS,
    Dataset,
    FeatureSchema,
    MetaDatasetSpec,
    load_feature_table,
    select_meta_dataset,
    split_holdout,
    write_feature_table,
)
from sitewiz.errors import SchemaError, StratificationError, ValidationError

from .conftest import make_dataset


def write_csv(path, text):
    path.write_bytes(text.encode("utf-8"))
    return path


def test_load_three_rows(tmp_path):
    path = write_csv(
        tmp_path / "t.csv",
        "subject_id,site,age,sex,f1\n"
        "a,S1,20.5,F,1.5\n"
        "b,S2,30,M,2.25\n"
        "c,S1,40,F,-3e-1\n"
    )
    data = load_feature_table(path)
    assert (data.n, data.n_features, data.k) == (3, 1, 2)
    assert data.subject_ids == ("a", "b", "c")
    assert data.site_registry == ("S1", "S2")
    np.testing.assert_array_equal(data.features[:, 0], [1.5, 2.25, -0.3])
    np.testing.assert_array_equal(data.column("age"), [20.5, 30, 40])
    assert "sex" in data.categorical
    np.testing.assert_array_equal(data.site_codes, [0, 1, 0])


def test_load_crlf(tmp_path):
    path = write_csv(tmp_path / "t.csv", "subject_id,site,age,f1\r\na,S1,1,2\r\nb,S1,3,4\r\n")
    data = load_feature_table(path)
    np.testing.assert_array_equal(data.features[:, 0], [2, 4])


def test_load_blank_age_names_row_and_column(tmp_path):
    path = write_csv(tmp_path / "t.csv", "subject_id,site,age,f1\na,S1,20,1\nb,S1,,2\nc,S1,30,x\n")
    with pytest.raises(ValidationError) as info:
        load_feature_table(path)

    issues = info.value.issues
    assert (1, "age", "missing value") in issues
    assert any(row == 2 and column == "f1" for row, column, _ in issues)
    assert "row 1, column 'age'" in str(info.value)


def test_load_duplicate_ids(tmp_path):
    path = write_csv(tmp_path / "t.csv", "subject_id,site,f1\na,S1,1\na,S1,2\n")
    with pytest.raises(ValidationError, match="duplicate subject id"):
        load_feature_table(path)


def test_load_missing_file_and_columns(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_feature_table(tmp_path / "missing.csv")

    path = write_csv(tmp_path / "t.csv", "subject_id,f1\na,1\n")
    with pytest.raises(SchemaError):
        load_feature_table(path)

    schema = FeatureSchema(feature_columns=("f1", "f2"))
    path = write_csv(tmp_path / "u.csv", "subject_id,site,f1\na,S,1\n")
    with pytest.raises(SchemaError, match="f2"):
        load_feature_table(path, schema)


def test_schema():
    schema = FeatureSchema.infer(["subject_id", "site", "age", "sex", "f1", "f2"])
    assert schema.covariate_columns == ("age", "sex")
    assert schema.feature_columns == ("f1", "f2")
    assert schema.categorical_columns == ("sex",)

    schema = FeatureSchema.infer(["subject_id", "site", "age", "sex", "f1"], covariates=("age",))
    assert schema.feature_columns == ("sex", "f1")

    with pytest.raises(SchemaError):
        FeatureSchema(feature_columns=())

    with pytest.raises(SchemaError):
        FeatureSchema(feature_columns=("age",), covariate_columns=("age",))


def test_write_reproduces_values(tmp_path, sex_dataset):
    path = tmp_path / "out.csv"
    write_feature_table(sex_dataset, path)
    assert b"\r\n" not in path.read_bytes()

    loaded = load_feature_table(path)
    assert loaded.subject_ids == sex_dataset.subject_ids
    assert loaded.feature_names == sex_dataset.feature_names
    np.testing.assert_array_equal(loaded.features, sex_dataset.features)
    np.testing.assert_array_equal(loaded.column("age"), sex_dataset.column("age"))
    np.testing.assert_array_equal(loaded.column("sex"), sex_dataset.column("sex"))


def test_dataset_validation():
    with pytest.raises(ValidationError):
        make_dataset([1.0, np.nan], ["A", "B"])

    with pytest.raises(ValidationError):
        make_dataset([1.0, 2.0], ["A", "B"], subject_ids=["x", "x"])

    with pytest.raises(ValidationError):
        make_dataset([1.0, 2.0], ["A", "C"], site_registry=("A", "B"))

    data = make_dataset([1.0, 2.0], ["A", "B"])
    with pytest.raises(ValueError):
        data.features[0, 0] = 3


def test_subset_and_concat():
    data = make_dataset(np.arange(6.0), ["A", "B", "C", "A", "B", "C"], age=np.arange(6.0))
    part = data.subset([3, 0])
    assert part.subject_ids == ("s0003", "s0000")
    assert part.site_registry == ("A",)
    assert data.subset([3, 0], shrink_registry=False).site_registry == ("A", "B", "C")

    joined = Dataset.concat([data.subset([0, 1]), data.subset([2])])
    assert joined.site_registry == ("A", "B", "C")
    np.testing.assert_array_equal(joined.features[:, 0], [0, 1, 2])


def balanced(n_per_site, sites):
    labels = np.repeat(sites, n_per_site)
    return make_dataset(np.arange(len(labels), dtype=float), labels)


def test_split_holdout_balanced():
    data = balanced(50, ["A", "B"])
    first, second = split_holdout(data, 0.5, "site", seed=4)
    assert first.n == second.n == 50
    assert Counter(first.sites) == {"A": 25, "B": 25}
    assert not set(first.subject_ids) & set(second.subject_ids)
    # original row order
    assert list(first.subject_ids) == sorted(first.subject_ids)


def test_split_holdout_deterministic():
    data = balanced(50, ["A", "B"])
    a, _ = split_holdout(data, 0.5, "site", seed=9)
    b, _ = split_holdout(data, 0.5, "site", seed=9)
    c, _ = split_holdout(data, 0.5, "site", seed=10)
    assert a.subject_ids == b.subject_ids
    assert a.subject_ids != c.subject_ids


def test_split_holdout_odd_strata():
    data = balanced(25, ["A", "B", "C"])
    first, second = split_holdout(data, 0.5, "site", seed=1)
    for site in "ABC":
        assert {Counter(first.sites)[site], Counter(second.sites)[site]} == {12, 13}


def test_split_holdout_errors():
    data = make_dataset([1.0, 2.0, 3.0], ["A", "A", "B"])
    with pytest.raises(StratificationError):
        split_holdout(data, 0.5, "site", seed=0)

    with pytest.raises(ValidationError):
        split_holdout(data, 1.0, "site", seed=0)


def test_select_meta_dataset():
    ages = [4, 5, 9, 13, 14, 10]
    sites = ["NKI2", "NKI2", "ABIDEI-KKI", "ABIDEI-KKI", "NKI2", "ICBM"]
    data = make_dataset(np.arange(6.0), sites, age=ages)
    selected = select_meta_dataset(data, META_DATASETS["CHILDHOOD"])
    assert selected.subject_ids == ("s0001", "s0002", "s0003")
    assert selected.site_registry == ("ABIDEI-KKI", "NKI2")

    with pytest.raises(ValidationError):
        select_meta_dataset(data, MetaDatasetSpec("NONE", 0, 100, ("elsewhere",)))


def test_meta_dataset_presets():
    sizes = {name: len(spec.included_sites) for name, spec in META_DATASETS.items()}
    assert sizes == {"CHILDHOOD": 11, "ADOLESCENCE": 9, "ADULTHOOD": 12, "LIFESPAN": 36}
    assert (META_DATASETS["LIFESPAN"].age_min, META_DATASETS["LIFESPAN"].age_max) == (5, 87)


def test_split_holdout_any_seed():
    data = make_dataset(np.arange(37.0), ["A"] * 20 + ["B"] * 17)
    for seed in range(100):
        first, second = split_holdout(data, 0.5, "site", seed)
        assert sorted(first.subject_ids + second.subject_ids) == sorted(data.subject_ids)
        assert Counter(first.sites)["A"] == Counter(second.sites)["A"] == 10
        assert abs(Counter(first.sites)["B"] - Counter(second.sites)["B"]) == 1
