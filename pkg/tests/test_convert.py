import json

import numpy as np
import pytest

from sitewiz import (
    FORMAT_VERSION,
    GbtParams,
    HarmonizationModel,
    Verdict,
    convert_from_dict,
    convert_to_dict,
    export_model,
    fit,
    import_model,
)
from sitewiz.errors import ModelFormatError


def test_export_import_spline_model(tmp_path, small_dataset):
    model = fit(small_dataset, "age:spline5")
    path = tmp_path / "model.json"
    export_model(model, path)

    document = json.loads(path.read_text(encoding="utf-8"))
    assert document["format_version"] == FORMAT_VERSION
    assert document["type"] == "sitewiz.combat.HarmonizationModel"
    assert document["data"]["site_location"]["shape"] == [3, 4]

    loaded = import_model(path)
    assert isinstance(loaded, HarmonizationModel)
    assert loaded.basis_knots == model.basis_knots
    assert loaded.covariates == model.covariates
    assert loaded.site_registry == model.site_registry
    assert loaded.eb_enabled
    np.testing.assert_array_equal(loaded.eb_hyperparams.location_mean, model.eb_hyperparams.location_mean)

    rows = small_dataset.subset(range(10))
    np.testing.assert_array_equal(loaded.transform(rows), model.transform(rows))


def test_export_import_categorical_model(tmp_path, sex_dataset):
    model = fit(sex_dataset, "age:quadratic,sex", eb=False)
    path = tmp_path / "model.json"
    export_model(model, path)
    loaded = import_model(path)
    assert loaded.bases == model.bases
    assert loaded.eb_hyperparams is None
    np.testing.assert_array_equal(loaded.transform(sex_dataset), model.transform(sex_dataset))


def test_import_errors(tmp_path, small_dataset):
    with pytest.raises(FileNotFoundError):
        import_model(tmp_path / "missing.json")

    export_model(fit(small_dataset, "age"), tmp_path / "model.json")
    text = (tmp_path / "model.json").read_text(encoding="utf-8")

    truncated = tmp_path / "truncated.json"
    truncated.write_text(text[:len(text) // 2], encoding="utf-8")
    with pytest.raises(ModelFormatError):
        import_model(truncated)

    document = json.loads(text)
    document["format_version"] = 99
    future = tmp_path / "future.json"
    future.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ModelFormatError, match="version"):
        import_model(future)

    document["format_version"] = FORMAT_VERSION
    document["type"] = "os.system"
    hostile = tmp_path / "hostile.json"
    hostile.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ModelFormatError):
        import_model(hostile)

    document = json.loads(text)
    document["data"]["site_scale"]["values"] = document["data"]["site_scale"]["values"][:-1]
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(ModelFormatError):
        import_model(broken)


def test_wrong_type_is_rejected(tmp_path):
    path = tmp_path / "params.json"
    path.write_text(json.dumps({"format_version": FORMAT_VERSION, **convert_to_dict(GbtParams())}))
    with pytest.raises(ModelFormatError, match="GbtParams"):
        import_model(path)


def test_unknown_parameters_warn():
    data = convert_to_dict(GbtParams(n_rounds=7))
    data["data"]["removed_option"] = 1
    with pytest.warns(UserWarning, match="removed_option"):
        params = convert_from_dict(data)

    assert params == GbtParams(n_rounds=7)


def test_enum_and_arrays():
    assert convert_from_dict(convert_to_dict(Verdict.REDUCED)) is Verdict.REDUCED
    assert convert_to_dict(np.arange(6.0).reshape(2, 3)) == {"shape": [2, 3], "values": [0, 1, 2, 3, 4, 5]}
    assert convert_to_dict(np.float64(0.5)) == 0.5
