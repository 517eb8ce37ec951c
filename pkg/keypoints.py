"""Keypoints Module - keyreg

Deterministic keypoint extraction:

- ``center_of_mass``: the CoM layer. Each non-negative activation map is
  reduced to its mass-weighted mean position in normalised [-1, 1]^3 space,
  scaled to voxel coordinates and mapped to world mm through the volume
  affine. Confidence is the spatial sum of the map.
- ``detect_blobs``: a scale-space Laplacian-of-Gaussian detector producing
  activation maps, standing in for a trained network.
- ``match_keypoints``: pairs two independent detections by assignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from coords import WorldAffine, apply_affine, grid_points, normalized_to_voxel, voxel_to_normalized
from errors import ConstantVolume, DegenerateConfiguration, InsufficientStructure, ZeroMassMap
from solvers import KeypointSet, solve_affine_weighted
from warp import Volume
from worker_pool import WorkerPool, resolve_pool

logger = logging.getLogger(__name__)

MEAN_SHIFT_ITERS = 20
MEAN_SHIFT_TOL_MM = 1e-4


class DetectorConfig(BaseModel):
    """Blob detector settings; scales are Gaussian sigmas in mm.

    ``window_scale`` sets the radius of the localisation window in units of
    the detection scale.
    """

    n_keypoints: int = Field(default=8, ge=4)
    blob_scales: List[float] = Field(default_factory=lambda: [2.0, 3.0, 4.0, 6.0, 8.0])
    min_activation_mass: float = Field(default=0.0, ge=0.0)
    response_floor: float = Field(default=0.05, ge=0.0)
    window_scale: float = Field(default=3.0, gt=0.0)

    @field_validator("blob_scales")
    @classmethod
    def _increasing(cls, scales: List[float]) -> List[float]:
        if not scales:
            raise ValueError("at least one blob scale is required")
        if any(s <= 0 for s in scales):
            raise ValueError("blob scales must be strictly positive")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("blob scales must be strictly increasing")
        return scales


@dataclass(frozen=True, eq=False)
class ActivationStack:
    """N non-negative maps sharing one voxel grid and its affine."""

    maps: np.ndarray
    affine: WorldAffine

    def __post_init__(self) -> None:
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim == 3:
            maps = maps[None]
        if maps.ndim != 4 or min(maps.shape) < 1:
            raise ValueError(f"activation maps must have shape (N, D, H, W), got {maps.shape}")
        # ReLU on ingestion
        maps = np.maximum(maps, 0.0)
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        if not isinstance(self.affine, WorldAffine):
            object.__setattr__(self, "affine", WorldAffine(self.affine))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.maps.shape[1:])

    def __len__(self) -> int:
        return self.maps.shape[0]


def zscore_normalize(vol: Volume) -> Volume:
    """Zero-mean, unit-variance intensities; affine and labels unchanged."""
    data = vol.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    if not std > 0:
        raise ConstantVolume("cannot z-score normalise a constant volume")
    return vol.with_data(((data - mean) / std).astype(np.float32))


def _map_moments(m: np.ndarray, dims: Tuple[int, int, int]) -> Tuple[float, np.ndarray]:
    mass = float(m.sum())
    axes = [voxel_to_normalized((d,), np.arange(d, dtype=np.float64)) for d in dims]
    normalized = np.empty(3)
    for a in range(3):
        other = tuple(b for b in range(3) if b != a)
        marginal = m.sum(axis=other)
        normalized[a] = float(np.dot(marginal, axes[a])) / mass if mass > 0 else 0.0
    return mass, normalized


def center_of_mass(
    stack: ActivationStack,
    min_activation_mass: float = 0.0,
    on_zero_mass: str = "raise",
    pool: Optional[WorkerPool] = None,
) -> KeypointSet | Tuple[KeypointSet, List[int]]:
    """Keypoints (world mm) and confidences from activation maps.

    With ``on_zero_mass="drop"`` maps at or below ``min_activation_mass``
    are skipped and ``(keypoints, kept_indices)`` is returned.
    """
    if on_zero_mass not in ("raise", "drop"):
        raise ValueError(f"on_zero_mass must be 'raise' or 'drop', got {on_zero_mass!r}")
    pool = resolve_pool(pool, 1)
    dims = stack.dims
    moments = pool.map(lambda m: _map_moments(m, dims), list(stack.maps))

    kept: List[int] = []
    points: List[np.ndarray] = []
    confidences: List[float] = []
    for i, (mass, normalized) in enumerate(moments):
        if mass <= min_activation_mass:
            if on_zero_mass == "raise":
                raise ZeroMassMap(f"activation map {i} has mass {mass:.3e} <= {min_activation_mass:.3e}", index=i)
            logger.info("dropping unlocatable activation map %d", i)
            continue
        voxel = normalized_to_voxel(dims, normalized)
        points.append(apply_affine(stack.affine.matrix, voxel))
        confidences.append(mass)
        kept.append(i)

    keypoints = KeypointSet(np.array(points).reshape(-1, 3), np.array(confidences))
    if on_zero_mass == "drop":
        return keypoints, kept
    return keypoints


# ----------------------------------------------------------------------------
# Blob detector
# ----------------------------------------------------------------------------

def _log_response(data: np.ndarray, sigma_mm: float, spacing: np.ndarray) -> np.ndarray:
    """Scale-normalised -sigma^2 Laplacian-of-Gaussian in world units."""
    sigma_vox = sigma_mm / spacing
    lap = np.zeros(data.shape, dtype=np.float64)
    for a in range(3):
        order = [0, 0, 0]
        order[a] = 2
        lap += ndimage.gaussian_filter(data, sigma_vox, order=order, mode="nearest") / spacing[a] ** 2
    return -(sigma_mm ** 2) * lap


def _scale_space_extrema(responses: np.ndarray, floor: float) -> np.ndarray:
    """(scale, i, j, k) indices of 3x3x3x3 local maxima above ``floor``."""
    peaks = ndimage.maximum_filter(responses, size=3, mode="nearest")
    mask = (responses == peaks) & (responses > floor)
    return np.argwhere(mask)


def _ball(world: np.ndarray, center: np.ndarray, radius_mm: float) -> np.ndarray:
    d = world - center
    return d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2 <= radius_mm ** 2


def _recentre(foreground: np.ndarray, world: np.ndarray, start: np.ndarray, radius_mm: float) -> Optional[np.ndarray]:
    """Mean-shift a ball of ``radius_mm`` onto the foreground mass it covers.

    Returns ``None`` when the ball holds no foreground.
    """
    center = start
    for _ in range(MEAN_SHIFT_ITERS):
        weights = np.where(_ball(world, center, radius_mm), foreground, 0.0)
        mass = weights.sum()
        if mass <= 0:
            return None
        new_center = np.array([(weights * world[..., a]).sum() / mass for a in range(3)])
        moved = np.linalg.norm(new_center - center)
        center = new_center
        if moved < MEAN_SHIFT_TOL_MM:
            break
    return center


def detect_blobs(vol: Volume, cfg: DetectorConfig, pool: Optional[WorkerPool] = None) -> ActivationStack:
    """Exactly ``cfg.n_keypoints`` activation maps, one per distinct bright blob.

    LoG extrema are ranked by descending response (ties by scale then index).
    Each one is re-centred in world space on the foreground it covers, and a
    candidate landing within twice its scale of an accepted blob is a
    duplicate. Windows never shrink below half the coarsest voxel spacing.
    """
    pool = resolve_pool(pool, 1)
    try:
        data = zscore_normalize(vol).data.astype(np.float64)
    except ConstantVolume as exc:
        raise InsufficientStructure("constant volume has no blob extrema") from exc
    spacing = vol.spacing
    scales = list(cfg.blob_scales)

    responses = np.stack(pool.map(lambda s: _log_response(data, s, spacing), scales))
    extrema = _scale_space_extrema(responses, cfg.response_floor)
    logger.debug("found %d scale-space extrema above %.3f", len(extrema), cfg.response_floor)
    if len(extrema) < cfg.n_keypoints:
        raise InsufficientStructure(
            f"only {len(extrema)} blob extrema above the response floor, need {cfg.n_keypoints}"
        )

    values = responses[tuple(extrema.T)]
    # argwhere is already sorted by (scale, i, j, k); a stable sort keeps that tie order
    order = np.argsort(-values, kind="stable")
    world_starts = apply_affine(vol.affine.matrix, extrema[order, 1:].astype(np.float64))
    world = apply_affine(vol.affine.matrix, grid_points(vol.dims))
    foreground = np.maximum(data - np.median(data), 0.0)

    coarsest = float(spacing.max())
    centres: List[np.ndarray] = []
    radii: List[float] = []
    duplicates = 0
    for idx in range(len(order)):
        sigma = scales[extrema[order[idx], 0]]
        if any(np.linalg.norm(world_starts[idx] - c) <= max(2.0 * sigma, coarsest) for c in centres):
            continue
        radius = cfg.window_scale * max(sigma, 0.5 * coarsest)
        centre = _recentre(foreground, world, world_starts[idx], radius)
        if centre is None:
            continue
        if any(np.linalg.norm(centre - c) <= 2.0 * sigma for c in centres):
            duplicates += 1
            continue
        centres.append(centre)
        radii.append(radius)
        if len(centres) == cfg.n_keypoints:
            break
    if duplicates:
        logger.debug("suppressed %d extrema that re-centred onto accepted blobs", duplicates)
    if len(centres) < cfg.n_keypoints:
        raise InsufficientStructure(
            f"only {len(centres)} distinct blobs survive suppression, need {cfg.n_keypoints}"
        )

    def build(i: int) -> np.ndarray:
        return np.where(_ball(world, centres[i], radii[i]), foreground, 0.0)

    maps = np.stack(pool.map(build, list(range(len(centres)))))
    logger.info("detected %d keypoints on a %s grid", len(centres), vol.dims)
    return ActivationStack(maps, vol.affine)


def detect_keypoints(vol: Volume, cfg: DetectorConfig, pool: Optional[WorkerPool] = None) -> KeypointSet:
    """Blob detection followed by the CoM layer."""
    stack = detect_blobs(vol, cfg, pool)
    return center_of_mass(stack, cfg.min_activation_mass, pool=pool)


# ----------------------------------------------------------------------------
# Correspondence
# ----------------------------------------------------------------------------

MATCH_ITERS = 10
# RMS residual of the fitted affine, as a fraction of the RMS spread of the fixed points
MAX_PAIRING_RESIDUAL = 0.25


def match_keypoints(moving: KeypointSet, fixed: KeypointSet, iterations: int = MATCH_ITERS) -> KeypointSet:
    """Reorder ``fixed`` so that row i corresponds to ``moving`` row i.

    Independent detections carry no channel identity, so pairs are assigned
    by minimum total distance: first between confidence-weighted centred
    point sets, then repeatedly after mapping ``moving`` through the affine
    fitted to the current assignment.

    Raises :class:`DegenerateConfiguration` when no affine explains the final
    pairing, e.g. when one detection covers the same blob twice.
    """
    if len(moving) != len(fixed):
        raise ValueError(f"cannot match {len(moving)} moving to {len(fixed)} fixed keypoints")
    src = moving.points - np.average(moving.points, axis=0, weights=moving.confidences)
    dst = fixed.points - np.average(fixed.points, axis=0, weights=fixed.confidences)
    _, order = linear_sum_assignment(cdist(src, dst))
    for _ in range(iterations):
        candidate = fixed.subset(order)
        try:
            t = solve_affine_weighted(moving, candidate)
        except DegenerateConfiguration:
            break
        _, new_order = linear_sum_assignment(cdist(t(moving.points), fixed.points))
        if np.array_equal(new_order, order):
            break
        order = new_order
    logger.debug("keypoint assignment %s", order.tolist())
    paired = fixed.subset(order)
    t = solve_affine_weighted(moving, paired)
    residual = float(np.sqrt(np.mean(np.sum((t(moving.points) - paired.points) ** 2, axis=1))))
    spread = float(np.sqrt(np.mean(np.sum((paired.points - paired.points.mean(axis=0)) ** 2, axis=1))))
    if residual > MAX_PAIRING_RESIDUAL * spread:
        raise DegenerateConfiguration(
            f"keypoint pairing is inconsistent: affine residual {residual:.2f} mm against a spread of {spread:.2f} mm"
        )
    return paired
