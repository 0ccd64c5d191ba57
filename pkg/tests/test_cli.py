import json

import numpy as np
import pytest

from sitewiz import DESK_SCALE, FULL_SCALE, __version__, load_feature_table
from sitewiz.cli import _scale, build_parser, main


FAST = ["--rounds", "5", "--max-depth", "2"]


@pytest.fixture
def table(tmp_path):
    path = tmp_path / "sim.csv"
    assert main(["simulate", "--preset", "ct-k3-n25", "--seed", "4", "--out", str(path)]) == 0
    return path


def read_report(path):
    return json.loads(path.read_text(encoding="utf-8"))


def without_duration(report):
    report["manifest"].pop("duration_seconds")
    return report


def test_simulate(table):
    data = load_feature_table(table)
    assert (data.n, data.n_features, data.k) == (75, 11, 3)

    sidecar = read_report(table.with_name("sim.truth.json"))
    assert sidecar["manifest"]["command"] == "simulate"
    assert sidecar["manifest"]["seed"] == 4
    assert sidecar["manifest"]["version"] == __version__
    assert sidecar["config"]["type"] == "sitewiz.simulate.SimulationConfig"
    assert sidecar["truth"]["sites"] == ["site01", "site02", "site03"]


def test_fit_then_apply(tmp_path, table):
    model = tmp_path / "model.json"
    out = tmp_path / "harmonized.csv"
    assert main(["fit", "--train", str(table), "--covariates", "age:quadratic", "--out", str(model)]) == 0
    assert main(["apply", "--model", str(model), "--data", str(table), "--out", str(out)]) == 0

    raw, harmonized = load_feature_table(table), load_feature_table(out)
    assert harmonized.subject_ids == raw.subject_ids
    assert harmonized.features.shape == raw.features.shape
    np.testing.assert_array_equal(harmonized.column("age"), raw.column("age"))
    assert not np.array_equal(harmonized.features, raw.features)


def test_usage_errors(tmp_path, capsys):
    assert main(["reticulate"]) == 1
    assert capsys.readouterr().err.startswith("error: ValidationError: ")

    assert main([]) == 1
    capsys.readouterr()

    assert main(["bc", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "bc.json")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: FileNotFoundError: ")
    assert err.count("\n") == 1


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert "audit-leakage" in capsys.readouterr().out
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


@pytest.mark.parametrize("flag", ["--paper-scale", "--full-scale"])
def test_scale_flag(flag):
    command = ["efficacy", "--data", "d.csv", "--out", "e.json"]
    assert _scale(build_parser().parse_args([flag, *command])) is FULL_SCALE
    assert _scale(build_parser().parse_args(command)) is DESK_SCALE


def test_cv_report_and_determinism(tmp_path, table):
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    arguments = ["cv", "--data", str(table), "--mode", "harmonizer_in_cv", "--covariates", "age", "--reps", "2", *FAST]
    assert main([*arguments, "--out", str(first)]) == 0
    assert main(["--threads", "2", *arguments, "--out", str(second)]) == 0

    report = read_report(first)
    assert report["manifest"]["input_digests"].keys() == {"data"}
    assert "threads" not in report["manifest"]["arguments"]
    assert "out" not in report["manifest"]["arguments"]
    assert report["samples"]["values"]["shape"] == [2, 5]
    assert report["confusion"]["classes"] == ["site01", "site02", "site03"]
    assert without_duration(report) == without_duration(read_report(second))


def test_age_leakage(tmp_path, table):
    out = tmp_path / "age.json"
    assert main([
        "age-leakage", "--data", str(table), "--covariates", "age", "--reps", "2", *FAST, "--out", str(out)
    ]) == 0
    report = read_report(out)
    assert report["harmonize_all"]["metric"] == report["harmonizer_in_cv"]["metric"] == "mean_absolute_error"
    assert report["harmonize_all"]["values"]["shape"] == report["harmonizer_in_cv"]["values"]["shape"] == [2, 5]
    assert 0 < report["wilcoxon_p"] <= 1


def test_efficacy(tmp_path, table):
    out = tmp_path / "efficacy.json"
    assert main([
        "efficacy", "--data", str(table), "--mode", "raw", "--reps", "2", "--n-perm", "3", *FAST, "--out", str(out)
    ]) == 0
    report = read_report(out)
    assert report["verdict"] in ("Removed", "Reduced", "NotReduced")
    assert report["wilcoxon_p"] is None
    assert report["permutation_p"] >= 0.25


def test_fd(tmp_path, capsys):
    out = tmp_path / "fd.json"
    assert main(["fd", "--generate", "cube:8", "--fixed-offsets", "--out", str(out)]) == 0
    report = read_report(out)
    assert report["fd"] == pytest.approx(3)
    assert report["dimensions"] == [8, 8, 8]
    assert report["n_occupied"] == 512

    assert main(["fd", "--out", str(out)]) == 1
    assert main(["fd", "--generate", "torus:3", "--out", str(out)]) == 1
    assert capsys.readouterr().err.count("error: ValidationError") == 2


def test_bc_and_ancova(tmp_path, table):
    out = tmp_path / "bc.json"
    assert main(["bc", "--data", str(table), "--bin-width", "5", "--out", str(out)]) == 0
    report = read_report(out)
    assert 0 < report["bc"] <= 1
    assert (report["n"], report["k"]) == (75, 3)

    out = tmp_path / "ancova.json"
    assert main(["ancova", "--data", str(table), "--features", "ct_01,ct_02", "--out", str(out)]) == 0
    report = read_report(out)
    assert report["covariates"] == ["age", "age^2"]
    assert [r["feature"] for r in report["results"]] == ["ct_01", "ct_02"]


def test_audit_leakage_needs_one_source(tmp_path, table):
    out = tmp_path / "audit.json"
    assert main(["audit-leakage", "--out", str(out)]) == 1
    assert main(["audit-leakage", "--preset", "ct-k3-n25", "--data", str(table), "--out", str(out)]) == 1


@pytest.mark.slow
def test_audit_leakage_preset(tmp_path):
    out = tmp_path / "audit.json"
    assert main([
        "audit-leakage", "--preset", "ct-k3-n25", "--reps", "2", "--covariates", "age", *FAST, "--out", str(out)
    ]) == 0
    report = read_report(out)
    assert report["arms"]["external"]["shape"] == [2]
    assert set(report["comparisons"]) == {"internal_leaked", "internal_not_leaked"}
    for prints in report["fingerprints"]:
        assert len(set(prints.values())) == 1
