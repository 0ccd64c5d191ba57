"""
Module contains the ``harmonize`` command line interface.

Every subcommand writes its outputs to the paths given with ``--out``.
JSON reports embed a :class:`RunManifest` under the ``"manifest"`` key.
"""
from __future__ import annotations
from typing import Any, Callable, Dict, List, Optional, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import argparse
import logging
import sys
import time

import pandas as pd

from . import __version__
from .audit import (
    DESK_SCALE,
    FULL_SCALE,
    RunScale,
    assess_efficacy,
    compare_age_prediction,
    leakage_experiment,
    mode_pipeline,
)
from .combat import fit
from .convert import convert_to_dict, dump_json, export_model, import_model
from .dataset import (
    META_DATASETS,
    Dataset,
    FeatureSchema,
    load_feature_table,
    select_meta_dataset,
    write_feature_table,
)
from .errors import ValidationError
from .fractal import VoxelGrid, fractal_dimension, menger_sponge, plane_slab, read_grid, solid_cube
from .pipeline import CvScheme, GbtClassifier, GbtRegressor, average_confusion, run_cv
from .predict import GbtParams
from .simulate import SIMULATION_PRESETS, simulate_dataset
from .stats import (
    BALANCED_ACCURACY,
    MEAN_ABSOLUTE_ERROR,
    PerformanceSamples,
    age_distribution_overlap,
    ancova_partial_eta2,
)
from .utilities import file_digest
from .doc import doc_category


__all__ = (
    "RunManifest",
    "build_parser",
    "main",
)


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
# Arguments that do not influence numeric results
UNECHOED_ARGUMENTS = ("threads", "log_level", "handler", "out")
INPUT_ARGUMENTS = ("train", "data", "model", "grid")
MODES = ("raw", "harmonize_all", "harmonizer_in_cv")
ANCOVA_COVARIATES = ("age", "age^2", "sex")


@doc_category("Reports", api_type="Command line")
@dataclass(frozen=True)
class RunManifest:
    """
    Provenance of a report.

    Parameters
    ------------
    command: str
        Subcommand name.
    arguments: Dict[str, Any]
        Every argument that influences the results.
    seed: Optional[int]
        Seed of the run, if the subcommand takes one.
    version: str
        SiteWizard version.
    input_digests: Dict[str, str]
        SHA-256 digest of every input file, by argument name.
    duration_seconds: float
        Wall-clock duration of the run.
    """
    command: str
    arguments: Dict[str, Any]
    seed: Optional[int]
    version: str
    input_digests: Dict[str, str]
    duration_seconds: float


class _ArgumentParser(argparse.ArgumentParser):
    "Raises usage errors instead of exiting, so they map onto the validation exit code."
    def error(self, message: str):
        raise ValidationError(f"{self.prog}: {message}")


def _split_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _load(args: argparse.Namespace, path: Path) -> Dataset:
    schema = None
    if args.covariate_columns is not None:
        header = pd.read_csv(path, nrows=0, dtype=str).columns.str.strip()
        schema = FeatureSchema.infer(header, _split_list(args.covariate_columns))

    data = load_feature_table(path, schema)
    if args.meta_dataset is not None:
        data = select_meta_dataset(data, META_DATASETS[args.meta_dataset])
        logger.info("Meta-dataset %s: n=%d, k=%d", args.meta_dataset, data.n, data.k)

    return data


def _scale(args: argparse.Namespace) -> RunScale:
    return FULL_SCALE if args.full_scale else DESK_SCALE


def _params(args: argparse.Namespace) -> GbtParams:
    return GbtParams(n_rounds=args.rounds, learning_rate=args.learning_rate, max_depth=args.max_depth)


def _samples_report(samples: PerformanceSamples) -> Dict[str, Any]:
    return {
        "metric": samples.metric,
        "values": samples.values,
        "repetition_means": samples.repetition_means,
        "summary": asdict(samples.summary),
    }


def _manifest(args: argparse.Namespace, started: float) -> Dict[str, Any]:
    arguments = {
        key: str(value) if isinstance(value, Path) else value
        for key, value in sorted(vars(args).items())
        if key not in UNECHOED_ARGUMENTS
    }
    digests = {
        key: file_digest(getattr(args, key))
        for key in INPUT_ARGUMENTS
        if getattr(args, key, None) is not None
    }
    manifest = RunManifest(
        command=args.command,
        arguments=arguments,
        seed=getattr(args, "seed", None),
        version=__version__,
        input_digests=digests,
        duration_seconds=time.perf_counter() - started,
    )
    return asdict(manifest)


def _write_report(args: argparse.Namespace, started: float, report: Dict[str, Any], path: Optional[Path] = None):
    path = path or args.out
    dump_json({"manifest": _manifest(args, started), **report}, path)
    logger.info("Report written to %s", path)


def _cmd_fit(args: argparse.Namespace, started: float):
    data = _load(args, args.train)
    model = fit(data, args.covariates, eb=not args.no_eb)
    export_model(model, args.out)
    logger.info("Model of %d sites and %d features written to %s", data.k, data.n_features, args.out)


def _cmd_apply(args: argparse.Namespace, started: float):
    model = import_model(args.model)
    data = _load(args, args.data)
    write_feature_table(data.with_features(model.transform(data)), args.out)


def _cmd_simulate(args: argparse.Namespace, started: float):
    config = SIMULATION_PRESETS[args.preset].with_seed(args.seed)
    simulated = simulate_dataset(config)
    write_feature_table(simulated.dataset, args.out)
    sidecar = args.out.with_name(f"{args.out.stem}.truth.json")
    _write_report(
        args, started, {"config": convert_to_dict(config), "truth": simulated.truth_to_dict()}, sidecar
    )


def _cmd_cv(args: argparse.Namespace, started: float):
    data = _load(args, args.data)
    params = _params(args)
    if args.target == "site":
        estimator, metric = GbtClassifier(params), BALANCED_ACCURACY
    else:
        estimator, metric = GbtRegressor(params), MEAN_ABSOLUTE_ERROR

    scheme = CvScheme(args.folds, args.reps or _scale(args).repetitions, "site", args.seed)
    pipeline = mode_pipeline(data, args.mode, estimator, args.covariates, not args.no_eb)
    samples = run_cv(pipeline, data, args.target, scheme, metric, args.threads)
    report = {"target": args.target, "mode": args.mode, "samples": _samples_report(samples)}
    if args.target == "site":
        confusion = average_confusion(samples, data.site_registry)
        report["confusion"] = {"classes": list(confusion.classes), "counts": confusion.counts}

    _write_report(args, started, report)


def _cmd_efficacy(args: argparse.Namespace, started: float):
    data = _load(args, args.data)
    scale = _scale(args)
    result = assess_efficacy(
        data,
        args.mode,
        scheme=CvScheme(args.folds, args.reps or scale.repetitions, "site", args.seed),
        n_perm=args.n_perm or scale.n_perm,
        covariates=args.covariates,
        eb=not args.no_eb,
        params=_params(args),
        bin_width=args.bin_width,
        seed=args.seed,
        n_jobs=args.threads,
    )
    _write_report(
        args,
        started,
        {
            "mode": result.mode,
            "verdict": result.verdict.value,
            "permutation_p": result.permutation_p,
            "wilcoxon_p": result.wilcoxon_p,
            "raw": _samples_report(result.raw_samples),
            "harmonized": _samples_report(result.harmonized_samples),
        },
    )


def _cmd_audit_leakage(args: argparse.Namespace, started: float):
    if (args.preset is None) == (args.data is None):
        raise ValidationError("Give exactly one of --preset and --data")

    source = SIMULATION_PRESETS[args.preset].with_seed(args.seed) if args.preset else _load(args, args.data)
    scale = _scale(args)
    result = leakage_experiment(
        source,
        task=args.task,
        repetitions=args.reps or scale.repetitions,
        scale=scale,
        folds=args.folds,
        params=_params(args),
        covariates=args.covariates,
        eb=not args.no_eb,
        seed=args.seed,
        n_jobs=args.threads,
    )
    _write_report(
        args,
        started,
        {
            "task": result.task,
            "metric": result.metric,
            "arms": {
                "external": result.external,
                "internal_leaked": result.internal_leaked,
                "internal_not_leaked": result.internal_not_leaked,
            },
            "external_mean": result.external_mean,
            "external_sd": result.external_sd,
            "comparisons": {name: asdict(comparison) for name, comparison in result.comparisons.items()},
            "fingerprints": list(result.fingerprints),
        },
    )


def _cmd_age_leakage(args: argparse.Namespace, started: float):
    data = _load(args, args.data)
    scheme = CvScheme(args.folds, args.reps or _scale(args).repetitions, "site", args.seed)
    result = compare_age_prediction(data, scheme, args.covariates, not args.no_eb, _params(args), args.threads)
    _write_report(
        args,
        started,
        {
            "harmonize_all": _samples_report(result.leaked),
            "harmonizer_in_cv": _samples_report(result.in_cv),
            "wilcoxon_p": result.wilcoxon_p,
        },
    )


def _generate_grid(text: str) -> VoxelGrid:
    generators: Dict[str, Callable[[int], VoxelGrid]] = {
        "cube": solid_cube, "slab": plane_slab, "sponge": menger_sponge
    }
    kind, _, size = text.partition(":")
    if kind not in generators or not size.isdigit():
        raise ValidationError(f"Invalid grid generator '{text}', expected cube:N, slab:N or sponge:LEVEL")

    return generators[kind](int(size))


def _cmd_fd(args: argparse.Namespace, started: float):
    if (args.grid is None) == (args.generate is None):
        raise ValidationError("Give exactly one of --grid and --generate")

    grid = read_grid(args.grid) if args.grid is not None else _generate_grid(args.generate)
    estimate = fractal_dimension(grid, args.offsets, args.seed, not args.fixed_offsets, args.threads)
    _write_report(
        args,
        started,
        {
            "fd": estimate.fd,
            "window": asdict(estimate.window),
            "curve": {
                "scales": list(estimate.curve.scales),
                "counts": estimate.curve.counts,
                "offset_counts": estimate.curve.offset_counts,
            },
            "dimensions": list(grid.dimensions),
            "n_occupied": grid.n_occupied,
        },
    )


def _cmd_bc(args: argparse.Namespace, started: float):
    data = _load(args, args.data)
    overlap = age_distribution_overlap(data, args.bin_width)
    _write_report(args, started, {"bc": overlap, "n": data.n, "k": data.k, "bin_width": args.bin_width})


def _cmd_ancova(args: argparse.Namespace, started: float):
    data = _load(args, args.data)
    if args.covariates is None:
        available = set(data.covariates.columns)
        covariates = [c for c in ANCOVA_COVARIATES if c.split("^")[0] in available]
    else:
        covariates = _split_list(args.covariates)

    features = _split_list(args.features) if args.features else list(data.feature_names)
    results = [ancova_partial_eta2(data, feature, covariates) for feature in features]
    _write_report(args, started, {"covariates": covariates, "results": [asdict(r) for r in results]})


def _add_data_options(parser: argparse.ArgumentParser, name: str = "--data", required: bool = True):
    parser.add_argument(name, type=Path, required=required, help="CSV feature table.")
    parser.add_argument(
        "--covariate-columns",
        help="Comma separated covariate columns of the table (default: age,sex where present)."
    )
    parser.add_argument("--meta-dataset", choices=sorted(META_DATASETS), help="Restrict to a meta-dataset.")


def _add_harmonizer_options(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--covariates", default="age:spline5",
        help="Covariate model, e.g. 'age:spline5,sex' (terms name[:linear|quadratic|spline<df>])."
    )
    parser.add_argument("--no-eb", action="store_true", help="Disable empirical Bayes shrinkage.")


def _add_predictor_options(parser: argparse.ArgumentParser):
    defaults = GbtParams()
    parser.add_argument("--rounds", type=int, default=defaults.n_rounds, help="Boosting rounds.")
    parser.add_argument("--learning-rate", type=float, default=defaults.learning_rate, help="Boosting shrinkage.")
    parser.add_argument("--max-depth", type=int, default=defaults.max_depth, help="Maximal tree depth.")


def _add_cv_options(parser: argparse.ArgumentParser):
    parser.add_argument("--folds", type=int, default=5, help="Cross-validation folds.")
    parser.add_argument(
        "--reps", type=int,
        help=f"Repetitions (default {DESK_SCALE.repetitions}, {FULL_SCALE.repetitions} with --paper-scale)."
    )
    parser.add_argument("--seed", type=int, default=0, help="Random seed.")


def _add_out(parser: argparse.ArgumentParser, description: str = "Output JSON report."):
    parser.add_argument("--out", type=Path, required=True, help=description)


@doc_category("Entry point", api_type="Command line")
def build_parser() -> argparse.ArgumentParser:
    """
    Builds the argument parser of the ``harmonize`` command.
    """
    parser = _ArgumentParser(
        prog="harmonize",
        description="Multi-site harmonization, leakage-free cross-validation and leakage audits."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="Logging level."
    )
    parser.add_argument("--threads", type=int, help="Worker threads (default: all available cores).")
    parser.add_argument(
        "--paper-scale", "--full-scale", dest="full_scale", action="store_true",
        help=f"Use {FULL_SCALE.repetitions} repetitions and {FULL_SCALE.n_perm} permutations by default."
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub = commands.add_parser("fit", help="Fit a harmonization model.")
    _add_data_options(sub, "--train")
    _add_harmonizer_options(sub)
    _add_out(sub, "Output model JSON.")
    sub.set_defaults(handler=_cmd_fit)

    sub = commands.add_parser("apply", help="Harmonize a feature table with a fitted model.")
    sub.add_argument("--model", type=Path, required=True, help="Model JSON written by 'fit'.")
    _add_data_options(sub)
    _add_out(sub, "Output CSV feature table.")
    sub.set_defaults(handler=_cmd_apply)

    sub = commands.add_parser("simulate", help="Generate a multi-site dataset with known site effects.")
    sub.add_argument("--preset", choices=sorted(SIMULATION_PRESETS), required=True, help="Simulation preset.")
    sub.add_argument("--seed", type=int, default=0, help="Random seed.")
    _add_out(sub, "Output CSV, the ground truth is written next to it as <stem>.truth.json.")
    sub.set_defaults(handler=_cmd_simulate)

    sub = commands.add_parser("cv", help="Cross-validate site or age prediction.")
    _add_data_options(sub)
    sub.add_argument("--target", choices=("site", "age"), default="site", help="Prediction target.")
    sub.add_argument("--mode", choices=MODES, default="harmonizer_in_cv", help="Harmonization mode.")
    _add_harmonizer_options(sub)
    _add_predictor_options(sub)
    _add_cv_options(sub)
    _add_out(sub)
    sub.set_defaults(handler=_cmd_cv)

    sub = commands.add_parser("efficacy", help="Assess how well a harmonization mode removes the site effect.")
    _add_data_options(sub)
    sub.add_argument("--mode", choices=MODES, default="harmonizer_in_cv", help="Harmonization mode.")
    sub.add_argument(
        "--n-perm", type=int,
        help=f"Permutations (default {DESK_SCALE.n_perm}, {FULL_SCALE.n_perm} with --paper-scale)."
    )
    sub.add_argument("--bin-width", type=float, default=5.0, help="Age bin width of the permutation test.")
    _add_harmonizer_options(sub)
    _add_predictor_options(sub)
    _add_cv_options(sub)
    _add_out(sub)
    sub.set_defaults(handler=_cmd_efficacy)

    sub = commands.add_parser("audit-leakage", help="Run the data leakage experiment.")
    sub.add_argument("--preset", choices=sorted(SIMULATION_PRESETS), help="Simulate the data from a preset.")
    _add_data_options(sub, required=False)
    sub.add_argument("--task", choices=("site", "age"), default="site", help="Prediction task.")
    _add_harmonizer_options(sub)
    _add_predictor_options(sub)
    _add_cv_options(sub)
    _add_out(sub)
    sub.set_defaults(handler=_cmd_audit_leakage)

    sub = commands.add_parser("age-leakage", help="Compare age prediction with and without leakage.")
    _add_data_options(sub)
    _add_harmonizer_options(sub)
    _add_predictor_options(sub)
    _add_cv_options(sub)
    _add_out(sub)
    sub.set_defaults(handler=_cmd_age_leakage)

    sub = commands.add_parser("fd", help="Box-counting fractal dimension of a voxel grid.")
    sub.add_argument("--grid", type=Path, help="Binary voxel grid file.")
    sub.add_argument("--generate", help="Generated grid instead: cube:N, slab:N or sponge:LEVEL.")
    sub.add_argument("--offsets", type=int, default=20, help="Random grid offsets per scale.")
    sub.add_argument("--fixed-offsets", action="store_true", help="Use the zero offset only.")
    sub.add_argument("--seed", type=int, default=0, help="Offset seed.")
    _add_out(sub)
    sub.set_defaults(handler=_cmd_fd)

    sub = commands.add_parser("bc", help="Bhattacharyya coefficient of the per-site age distributions.")
    _add_data_options(sub)
    sub.add_argument("--bin-width", type=float, default=1.0, help="Age bin width, in years.")
    _add_out(sub)
    sub.set_defaults(handler=_cmd_bc)

    sub = commands.add_parser("ancova", help="Site effect size of every feature (partial eta squared).")
    _add_data_options(sub)
    sub.add_argument("--features", help="Comma separated features (default: all).")
    sub.add_argument("--covariates", help="Comma separated covariates, name^2 adds a square (default: age,age^2,sex).")
    _add_out(sub)
    sub.set_defaults(handler=_cmd_ancova)

    return parser


@doc_category("Entry point", api_type="Command line")
def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Runs the ``harmonize`` command.

    Returns
    ---------
    int
        0 on success, 1 on invalid input (a single ``error: <Class>: <message>`` line on stderr),
        2 on an internal error (``internal-error: <Class>: <message>``).
    """
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
        logging.captureWarnings(True)
        args.handler(args, started)
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else 0
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("Internal error", exc_info=True)
        print(f"internal-error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2

    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())
