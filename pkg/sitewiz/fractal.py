"""
Module contains the 3D box-counting fractal dimension estimator with automatic
selection of the fractal scaling window, and the binary voxel grid format.
"""
from __future__ import annotations
from typing import List, Optional, Sequence, Tuple, Union
from dataclasses import dataclass
from pathlib import Path

import logging
import os

import numpy as np

from .errors import ModelFormatError, ValidationError
from .utilities import derive_seed, parallel_map
from .doc import doc_category


__all__ = (
    "VoxelGrid",
    "BoxCountCurve",
    "ScalingWindow",
    "FdEstimate",
    "box_count",
    "select_scaling_window",
    "fractal_dimension",
    "read_grid",
    "write_grid",
    "solid_cube",
    "plane_slab",
    "menger_sponge",
)


logger = logging.getLogger(__name__)

GRID_MAGIC = 0x56585747
GRID_VERSION = 1
GRID_HEADER = np.dtype("<i4")
SCALE_EXPONENTS = tuple(range(9))
R2_DECIMALS = 4
MIN_WINDOW = 3


@doc_category("Fractal dimension")
@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """
    Binary 3D occupancy grid of isotropic unit voxels.

    Parameters
    ------------
    occupancy: numpy.ndarray
        3D array, non-zero voxels are occupied.
    """
    occupancy: np.ndarray

    def __post_init__(self):
        occupancy = np.array(self.occupancy, dtype=bool)
        if occupancy.ndim != 3 or min(occupancy.shape) < 1:
            raise ValidationError(f"A voxel grid must be a non-empty 3D array, got shape {occupancy.shape}")

        occupancy.setflags(write=False)
        object.__setattr__(self, "occupancy", occupancy)

    @property
    def dimensions(self) -> Tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def n_occupied(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def bounding_box(self) -> np.ndarray:
        "The occupancy cropped to the occupied voxels."
        if not self.n_occupied:
            raise ValidationError("The grid has no occupied voxel")

        slices = []
        for axis in range(3):
            other = tuple(a for a in range(3) if a != axis)
            occupied = np.nonzero(self.occupancy.any(axis=other))[0]
            slices.append(slice(occupied[0], occupied[-1] + 1))

        return self.occupancy[tuple(slices)]


@doc_category("Fractal dimension")
@dataclass(frozen=True, eq=False)
class BoxCountCurve:
    """
    Box counts per scale.

    Parameters
    ------------
    scales: Sequence[int]
        Box sizes in voxels.
    offset_counts: numpy.ndarray
        Count of every (scale, offset), shape (n_scales, n_offsets).
    """
    scales: Tuple[int, ...]
    offset_counts: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        "Mean count over offsets, per scale."
        return np.asarray(self.offset_counts, dtype=float).mean(axis=1)

    @property
    def n_offsets(self) -> int:
        return np.shape(self.offset_counts)[1]


@doc_category("Fractal dimension")
@dataclass(frozen=True)
class ScalingWindow:
    """
    Contiguous range of scales ``scales[start:stop + 1]`` with the best linear log-log fit.

    Parameters
    ------------
    start: int
        Index of the first scale.
    stop: int
        Index of the last scale (inclusive).
    r2_adj: float
        Rounded adjusted coefficient of determination.
    slope: float
        Slope of log(count) against log(scale).
    intercept: float
        Intercept of the fit.
    """
    start: int
    stop: int
    r2_adj: float
    slope: float
    intercept: float

    @property
    def n_points(self) -> int:
        return self.stop - self.start + 1


@doc_category("Fractal dimension")
@dataclass(frozen=True, eq=False)
class FdEstimate:
    "Fractal dimension and the data it was estimated from."
    fd: float
    window: ScalingWindow
    curve: BoxCountCurve


def _count_boxes(occupancy: np.ndarray, scale: int, offset: Sequence[int]) -> int:
    # boxes of side `scale`, the grid origin shifted by `offset` voxels into the first box
    reduced = occupancy
    for axis, shift in enumerate(offset):
        size = reduced.shape[axis]
        starts = np.concatenate(([0], np.arange(scale - shift, size, scale))) if scale > 1 else np.arange(size)
        reduced = np.logical_or.reduceat(reduced, starts, axis=axis)

    return int(np.count_nonzero(reduced))


@doc_category("Fractal dimension")
def box_count(
    grid: VoxelGrid,
    n_offsets: int = 20,
    seed: int = 0,
    random_offsets: bool = True,
    scale_exponents: Sequence[int] = SCALE_EXPONENTS,
    n_jobs: Optional[int] = 1,
) -> BoxCountCurve:
    """
    Counts the boxes of side ``s = 2 ** k`` holding at least one occupied voxel.

    The grid is first cropped to its occupied voxels. At every scale, the box lattice is
    shifted by ``n_offsets`` offsets drawn uniformly from ``[0, s) ** 3``, fresh for every scale.

    Parameters
    ------------
    grid: VoxelGrid
        The grid.
    n_offsets: int
        Offsets per scale.
    seed: int
        Offset seed. Scale ``k`` draws from a seed derived from ``(seed, k)``.
    random_offsets: bool
        When False, every offset is zero.
    scale_exponents: Sequence[int]
        Exponents ``k`` of the scales.
    n_jobs: Optional[int]
        Worker threads over scales.

    Raises
    ------------
    ValidationError
        The grid is empty or ``n_offsets < 1``.
    """
    if n_offsets < 1:
        raise ValidationError(f"n_offsets must be at least 1, got {n_offsets}")

    occupancy = grid.bounding_box()

    def count_scale(exponent: int) -> List[int]:
        scale = 2 ** exponent
        if random_offsets:
            offsets = np.random.default_rng(derive_seed(seed, exponent)).integers(0, scale, size=(n_offsets, 3))
        else:
            offsets = np.zeros((n_offsets, 3), dtype=int)

        return [_count_boxes(occupancy, scale, offset) for offset in offsets]

    counts = parallel_map(count_scale, scale_exponents, n_jobs)
    return BoxCountCurve(tuple(2 ** k for k in scale_exponents), np.array(counts, dtype=np.int64))


def _fit_window(x: np.ndarray, y: np.ndarray) -> Tuple[float, float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    residual = np.sum((y - (slope * x + intercept)) ** 2)
    total = np.sum((y - y.mean()) ** 2)
    # constant counts (scales beyond the object) carry no scaling information
    r2 = 0.0 if total == 0 else 1.0 - residual / total
    m = len(x)
    return 1.0 - (1.0 - r2) * (m - 1) / (m - 2), float(slope), float(intercept)


@doc_category("Fractal dimension")
def select_scaling_window(curve: BoxCountCurve, decimals: int = R2_DECIMALS) -> ScalingWindow:
    """
    Selects the contiguous window of at least 3 scales whose log-log linear fit has the
    highest adjusted R squared, rounded to ``decimals`` decimals. Ties go to the widest
    window, then to the window starting at the smallest scale. Windows of constant
    counts score 0.

    Raises
    ------------
    ValidationError
        Fewer than 3 scales have a positive finite count.
    """
    counts = curve.counts
    usable = np.nonzero(np.isfinite(counts) & (counts > 0))[0]
    if len(usable) < MIN_WINDOW:
        raise ValidationError("At least 3 scales with positive counts are needed")
    if np.any(np.diff(usable) != 1):
        # windows must not jump over unusable scales, keep the first contiguous run
        usable = usable[:np.argmax(np.diff(usable) != 1) + 1]
        if len(usable) < MIN_WINDOW:
            raise ValidationError("At least 3 contiguous scales with positive counts are needed")

    x = np.log(np.asarray(curve.scales, dtype=float))
    y = np.log(np.where(counts > 0, counts, 1.0))
    best, best_key = None, None
    for start in usable:
        for stop in range(start + MIN_WINDOW - 1, usable[-1] + 1):
            r2_adj, slope, intercept = _fit_window(x[start:stop + 1], y[start:stop + 1])
            r2_adj = round(r2_adj, decimals)
            key = (-r2_adj, -(stop - start), start)
            if best_key is None or key < best_key:
                best_key = key
                best = ScalingWindow(int(start), int(stop), r2_adj, slope, intercept)

    return best


@doc_category("Fractal dimension")
def fractal_dimension(
    grid: VoxelGrid,
    n_offsets: int = 20,
    seed: int = 0,
    random_offsets: bool = True,
    n_jobs: Optional[int] = 1,
) -> FdEstimate:
    """
    Box-counting fractal dimension: the absolute slope of the log-log fit
    inside the automatically selected scaling window.

    Example
    -----------
    .. code-block:: python

        estimate = fractal_dimension(menger_sponge(4), n_offsets=20, seed=1)
        estimate.fd  # close to log(20) / log(3)
    """
    curve = box_count(grid, n_offsets, seed, random_offsets, n_jobs=n_jobs)
    window = select_scaling_window(curve)
    logger.debug("Scaling window %s: FD=%.4f", window, abs(window.slope))
    return FdEstimate(abs(window.slope), window, curve)


@doc_category("Fractal dimension")
def read_grid(path: Union[str, os.PathLike]) -> VoxelGrid:
    """
    Reads a binary voxel grid file: six little-endian int32 header values
    (magic ``0x56585747``, version 1, nx, ny, nz, reserved 0) followed by
    ``nx * ny * nz`` bytes of 0 / 1 in C order.

    Raises
    ------------
    ModelFormatError
        The file is truncated, has a wrong magic or version or invalid voxel values.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 6 * GRID_HEADER.itemsize:
        raise ModelFormatError(f"'{path.name}' is too short for a grid header")

    magic, version, nx, ny, nz, reserved = np.frombuffer(raw, dtype=GRID_HEADER, count=6).tolist()
    if magic != GRID_MAGIC:
        raise ModelFormatError(f"'{path.name}' is not a voxel grid file")
    if version != GRID_VERSION:
        raise ModelFormatError(f"Unsupported grid version {version}, expected {GRID_VERSION}")
    if min(nx, ny, nz) < 1 or reserved != 0:
        raise ModelFormatError(f"Invalid grid header ({nx}, {ny}, {nz}, {reserved})")

    payload = np.frombuffer(raw, dtype=np.uint8, offset=6 * GRID_HEADER.itemsize)
    if len(payload) != nx * ny * nz:
        raise ModelFormatError(f"'{path.name}' holds {len(payload)} voxels, the header declares {nx * ny * nz}")
    if np.any(payload > 1):
        raise ModelFormatError(f"'{path.name}' has voxel values other than 0 and 1")

    return VoxelGrid(payload.reshape(nx, ny, nz))


@doc_category("Fractal dimension")
def write_grid(grid: VoxelGrid, path: Union[str, os.PathLike]):
    "Writes ``grid`` in the format read by :func:`read_grid`."
    header = np.array([GRID_MAGIC, GRID_VERSION, *grid.dimensions, 0], dtype=GRID_HEADER)
    Path(path).write_bytes(header.tobytes() + grid.occupancy.astype(np.uint8).tobytes(order="C"))


@doc_category("Fractal dimension")
def solid_cube(n: int) -> VoxelGrid:
    "Fully occupied ``n ** 3`` grid."
    return VoxelGrid(np.ones((n, n, n), dtype=bool))


@doc_category("Fractal dimension")
def plane_slab(n: int, thickness: int = 1) -> VoxelGrid:
    "Fully occupied ``n x n x thickness`` grid."
    return VoxelGrid(np.ones((n, n, thickness), dtype=bool))


@doc_category("Fractal dimension")
def menger_sponge(level: int) -> VoxelGrid:
    "Menger sponge of ``level`` iterations on a ``3 ** level`` grid."
    if level < 0:
        raise ValidationError(f"level must not be negative, got {level}")

    index = np.indices((3, 3, 3))
    pattern = (index == 1).sum(axis=0) < 2
    sponge = np.ones((1, 1, 1), dtype=bool)
    for _ in range(level):
        sponge = np.kron(sponge, pattern).astype(bool)

    return VoxelGrid(sponge)
