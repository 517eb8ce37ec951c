"""Warp Module - keyreg

Resampling-free warping. For every fixed voxel x the moving image is sampled
once at A_m^-1 T(A_f x); no intermediate grid is ever built.

Direction convention: a solved affine maps moving -> fixed and is inverted
here, while a TPS passed to the warper is already the fixed -> moving map
(solved with the keypoint roles swapped, see ``registration_transform``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from coords import WorldAffine, apply_affine, grid_points, invert
from errors import DimMismatch
from solvers import AffineTransform, KeypointSet, RigidTransform, TpsTransform, apply, solve_transform
from worker_pool import WorkerPool, resolve_pool

logger = logging.getLogger(__name__)

WorldTransform = Union[AffineTransform, RigidTransform, TpsTransform]

INTENSITY = "intensity"
LABELS = "labels"
BOUNDS_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid with its voxel-to-world affine and optional labels."""

    data: np.ndarray
    affine: WorldAffine
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        affine = self.affine if isinstance(self.affine, WorldAffine) else WorldAffine(self.affine)
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != data.shape:
                raise DimMismatch(f"labels shape {labels.shape} differs from data shape {data.shape}")
            if not np.issubdtype(labels.dtype, np.integer):
                labels = labels.astype(np.int32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "labels", labels)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def spacing(self) -> np.ndarray:
        return self.affine.spacing

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=data)

    def with_labels(self, labels: Optional[np.ndarray]) -> "Volume":
        return replace(self, labels=labels)

    def label_ids(self) -> list[int]:
        """Non-background labels present in the grid, ascending."""
        if self.labels is None:
            return []
        return [int(v) for v in np.unique(self.labels) if v != 0]


def registration_transform(
    kind: str,
    moving: KeypointSet,
    fixed: KeypointSet,
    lam: Optional[float] = None,
    weighted: bool = True,
) -> WorldTransform:
    """Transform ready for :func:`warp_to_fixed_grid`.

    Affine and rigid solves return moving -> fixed maps. TPS is solved with
    the roles swapped so it maps fixed -> moving, which the warper evaluates
    directly.
    """
    if kind == "tps":
        moving, fixed = fixed, moving
    return solve_transform(kind, moving, fixed, lam, weighted)


def pullback_matrix(t: AffineTransform) -> np.ndarray:
    return invert(WorldAffine(t.matrix)).matrix


def pullback(t: WorldTransform, world_points: np.ndarray) -> np.ndarray:
    """Moving-world locations sampled for fixed-world points."""
    if isinstance(t, AffineTransform):
        return apply_affine(pullback_matrix(t), world_points)
    if isinstance(t, TpsTransform):
        return apply(t, world_points)
    raise TypeError(f"unsupported transform type: {type(t).__name__}")


def sample_coordinates(moving: Volume, fixed_grid: Volume, t: WorldTransform, start: int, stop: int) -> np.ndarray:
    """Continuous moving-voxel coordinates for fixed rows ``start:stop``, shape (n, H, W, 3)."""
    vox = grid_points(fixed_grid.dims, start, stop)
    if isinstance(t, AffineTransform):
        # A_m^-1 T^-1 A_f collapses into one matrix
        chain = invert(moving.affine).matrix @ pullback_matrix(t) @ fixed_grid.affine.matrix
        return apply_affine(chain, vox)
    world = apply_affine(fixed_grid.affine.matrix, vox)
    return apply_affine(invert(moving.affine).matrix, pullback(t, world))


def _in_bounds(coords: np.ndarray, dims: Tuple[int, int, int]) -> np.ndarray:
    upper = np.asarray(dims, dtype=np.float64) - 1.0
    return np.all((coords >= -BOUNDS_EPS) & (coords <= upper + BOUNDS_EPS), axis=-1)


def _sample(grid: np.ndarray, coords: np.ndarray, mode: str, fill: float = 0.0) -> np.ndarray:
    dims = grid.shape
    inside = _in_bounds(coords, dims)
    clipped = np.clip(coords, 0.0, np.asarray(dims, dtype=np.float64) - 1.0)
    flat = clipped.reshape(-1, 3)
    if mode == LABELS:
        idx = np.floor(flat + 0.5).astype(np.intp)
        values = grid[idx[:, 0], idx[:, 1], idx[:, 2]]
    else:
        values = ndimage.map_coordinates(grid, flat.T, order=1, mode="nearest", prefilter=False)
    values = values.reshape(coords.shape[:-1])
    return np.where(inside, values, np.asarray(fill, dtype=values.dtype))


def warp_to_fixed_grid(
    moving: Volume,
    fixed_grid: Volume,
    t: WorldTransform,
    mode: str = INTENSITY,
    threads: Optional[int] = None,
    pool: Optional[WorkerPool] = None,
) -> Volume:
    """Moving image resampled once onto the fixed grid.

    ``mode="intensity"`` samples ``moving.data`` trilinearly and warps labels
    (if any) by nearest neighbour; ``mode="labels"`` warps only the label grid
    and returns it as both data and labels. Out-of-bounds samples are 0.
    """
    if mode not in (INTENSITY, LABELS):
        raise ValueError(f"unknown interpolation mode: {mode}")
    pool = resolve_pool(pool, threads)
    data64 = moving.data.astype(np.float64)

    def intensity_slab(start: int, stop: int) -> np.ndarray:
        coords = sample_coordinates(moving, fixed_grid, t, start, stop)
        return _sample(data64, coords, INTENSITY).astype(np.float32)

    def label_slab(start: int, stop: int) -> np.ndarray:
        coords = sample_coordinates(moving, fixed_grid, t, start, stop)
        return _sample(moving.labels, coords, LABELS, fill=0)

    labels = None
    if moving.labels is not None:
        labels = pool.map_slabs(label_slab, fixed_grid.dims[0])
    if mode == LABELS:
        if labels is None:
            raise ValueError("label mode requires a moving volume with labels")
        return Volume(labels.astype(np.float32), fixed_grid.affine, labels)

    data = pool.map_slabs(intensity_slab, fixed_grid.dims[0])
    logger.debug("warped %s onto %s", moving.dims, fixed_grid.dims)
    return Volume(data, fixed_grid.affine, labels)


def warp_labels_soft(
    moving: Volume,
    fixed_grid: Volume,
    t: WorldTransform,
    labels: Iterable[int],
    threads: Optional[int] = None,
    pool: Optional[WorkerPool] = None,
) -> Dict[int, np.ndarray]:
    """Trilinearly warped one-hot masks: label -> probability grid on the fixed grid."""
    if moving.labels is None:
        raise ValueError("soft label warping requires moving labels")
    pool = resolve_pool(pool, threads)
    labels = list(labels)
    onehots = {lab: (moving.labels == lab).astype(np.float64) for lab in labels}

    def slab(start: int, stop: int) -> np.ndarray:
        coords = sample_coordinates(moving, fixed_grid, t, start, stop)
        return np.stack([_sample(onehots[lab], coords, INTENSITY) for lab in labels], axis=-1)

    stacked = pool.map_slabs(slab, fixed_grid.dims[0])
    return {lab: stacked[..., i] for i, lab in enumerate(labels)}


def displacement_field(
    fixed_grid: Volume,
    t: WorldTransform,
    threads: Optional[int] = None,
    pool: Optional[WorkerPool] = None,
) -> np.ndarray:
    """World displacement t(p) - p in mm at every fixed voxel, shape (D, H, W, 3)."""
    pool = resolve_pool(pool, threads)

    def slab(start: int, stop: int) -> np.ndarray:
        world = apply_affine(fixed_grid.affine.matrix, grid_points(fixed_grid.dims, start, stop))
        return t(world) - world

    return pool.map_slabs(slab, fixed_grid.dims[0])
