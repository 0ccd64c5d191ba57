"""
Utility module.
"""
from typing import Any, Callable, Iterable, List, Optional, TypeVar
from pathlib import Path

from joblib import Parallel, delayed

import importlib
import hashlib
import os

import numpy as np

from .errors import ValidationError
from .doc import doc_category


__all__ = (
    "import_class",
    "derive_seed",
    "parallel_map",
    "resolve_n_jobs",
    "file_digest",
    "as_finite_matrix",
)


T = TypeVar("T")
R = TypeVar("R")


@doc_category("Utilities")
def import_class(path: str) -> type:
    """
    Imports the class provided by it's ``path`` (``"package.module.ClassName"``).
    """
    module_path, _, class_name = path.rpartition(".")
    if not module_path:
        raise ValueError(f"'{path}' is not a dotted class path")

    module = importlib.import_module(module_path)
    return getattr(module, class_name)


@doc_category("Utilities")
def derive_seed(base_seed: int, *indices: int) -> int:
    """
    Derives an independent, reproducible seed for a sub-task
    (e.g., a permutation replica or an offset draw) from ``base_seed``.

    The derived seed only depends on the arguments, so work items
    can run in any order and on any number of workers.
    """
    sequence = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, *map(int, indices)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


@doc_category("Utilities")
def resolve_n_jobs(n_jobs: Optional[int]) -> int:
    """
    Returns the effective worker count. ``None`` or values < 1 mean
    "all available cores".
    """
    if n_jobs is None or n_jobs < 1:
        return os.cpu_count() or 1

    return n_jobs


@doc_category("Utilities")
def parallel_map(fnc: Callable[..., R], items: Iterable[T], n_jobs: Optional[int] = 1) -> List[R]:
    """
    Calls ``fnc`` on each item and returns the results in input order.

    Parameters
    --------------
    fnc: Callable
        The function to call. Each item is passed as a single positional argument.
    items: Iterable
        Work items.
    n_jobs: Optional[int]
        Number of worker threads. 1 runs everything in the calling thread.
    """
    items = list(items)
    n_jobs = min(resolve_n_jobs(n_jobs), max(len(items), 1))
    if n_jobs == 1:
        return [fnc(item) for item in items]

    # numpy releases the GIL in the heavy kernels, threads avoid pickling datasets
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(fnc)(item) for item in items)


@doc_category("Utilities")
def file_digest(path: os.PathLike) -> str:
    """
    Returns the SHA-256 hex digest of the file at ``path``.
    """
    digest = hashlib.sha256()
    with open(Path(path), "rb") as file:
        for chunk in iter(lambda: file.read(1 << 20), b""):
            digest.update(chunk)

    return digest.hexdigest()


def as_finite_matrix(values: Any, name: str = "X", columns: Optional[int] = None) -> np.ndarray:
    """
    Converts ``values`` into a 2D float array and checks that every entry is finite.
    """
    matrix = np.asarray(values, dtype=float)
    if matrix.ndim == 1:
        if matrix.size == 0 and columns is not None:
            matrix = matrix.reshape(0, columns)
        else:
            matrix = matrix.reshape(-1, 1)

    if matrix.ndim != 2:
        raise ValidationError(f"{name} must be a 2D matrix, got {matrix.ndim} dimensions")

    if columns is not None and matrix.shape[1] != columns:
        raise ValidationError(f"{name} has {matrix.shape[1]} columns, expected {columns}")

    if not np.all(np.isfinite(matrix)):
        rows = np.unique(np.nonzero(~np.isfinite(matrix))[0])
        raise ValidationError(
            f"{name} contains non-finite values",
            [(int(r), None, "non-finite value") for r in rows]
        )

    return matrix
