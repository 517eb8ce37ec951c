"""Coordinates Module - keyreg

Homogeneous-coordinate algebra for voxel <-> world mappings.

Affines are 4x4 float64 matrices with the last row pinned to (0, 0, 0, 1).
World coordinates are millimetres in scanner space; no RAS/LPS convention is
assumed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from errors import SingularAffine

SINGULAR_DET = 1e-12
_LAST_ROW = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class WorldAffine:
    """Voxel-to-world (or world-to-world) homogeneous map."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine has non-finite entries")
        if not np.array_equal(m[3], _LAST_ROW):
            raise ValueError(f"affine last row must be (0, 0, 0, 1), got {tuple(m[3])}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "WorldAffine":
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, linear: np.ndarray, translation: Sequence[float]) -> "WorldAffine":
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = translation
        return cls(m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def spacing(self) -> np.ndarray:
        """Voxel edge lengths in mm (column norms of the linear block)."""
        return np.sqrt(np.sum(self.linear ** 2, axis=0))

    def is_invertible(self) -> bool:
        return abs(np.linalg.det(self.linear)) > SINGULAR_DET

    def __repr__(self) -> str:
        return f"WorldAffine({self.matrix.tolist()})"


def apply_affine(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 homogeneous matrix to an (..., 3) array of points.

    Element-wise products only: every output element depends on its own input
    row, so any split of ``points`` reproduces the same bits.
    """
    p = np.asarray(points, dtype=np.float64)
    m = np.asarray(matrix, dtype=np.float64)
    out = np.empty(p.shape, dtype=np.float64)
    for r in range(3):
        out[..., r] = p[..., 0] * m[r, 0] + p[..., 1] * m[r, 1] + p[..., 2] * m[r, 2] + m[r, 3]
    return out


def voxel_to_world(a: WorldAffine, v) -> np.ndarray:
    """World point(s) in mm for continuous voxel index(es) ``v`` of shape (..., 3)."""
    return apply_affine(a.matrix, v)


def world_to_voxel(a: WorldAffine, p) -> np.ndarray:
    """Continuous voxel index(es) for world point(s) ``p``."""
    return apply_affine(invert(a).matrix, p)


def compose(outer: WorldAffine, inner: WorldAffine) -> WorldAffine:
    """The affine ``x -> outer(inner(x))``."""
    m = outer.matrix @ inner.matrix
    m[3] = _LAST_ROW
    return WorldAffine(m)


def invert(a: WorldAffine) -> WorldAffine:
    det = np.linalg.det(a.linear)
    if abs(det) <= SINGULAR_DET:
        raise SingularAffine(f"affine linear block is singular (|det|={abs(det):.3e})")
    linv = np.linalg.inv(a.linear)
    return WorldAffine.from_parts(linv, -linv @ a.translation)


def normalized_to_voxel(dims: Tuple[int, int, int], n) -> np.ndarray:
    """Map [-1, 1]^3 onto voxel centres: -1 -> 0 and +1 -> dim - 1 per axis."""
    d = np.asarray(dims, dtype=np.float64)
    if np.any(d < 1):
        raise ValueError(f"grid dims must be >= 1, got {tuple(dims)}")
    return (np.asarray(n, dtype=np.float64) + 1.0) * 0.5 * (d - 1.0)


def voxel_to_normalized(dims: Tuple[int, int, int], v) -> np.ndarray:
    """Inverse of :func:`normalized_to_voxel`; singleton axes map to 0."""
    d = np.asarray(dims, dtype=np.float64)
    span = np.where(d > 1, d - 1.0, 1.0)
    n = np.asarray(v, dtype=np.float64) * 2.0 / span - 1.0
    return np.where(d > 1, n, 0.0)


def grid_points(dims: Tuple[int, int, int], start: int = 0, stop: int | None = None) -> np.ndarray:
    """Integer voxel indices of rows ``start:stop`` along axis 0, shape (n, H, W, 3)."""
    stop = dims[0] if stop is None else stop
    i, j, k = np.meshgrid(
        np.arange(start, stop, dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    return np.stack([i, j, k], axis=-1)
