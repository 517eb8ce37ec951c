"""Phantom Module - keyreg

Synthetic ground truth: analytic ellipsoid anatomies rendered at arbitrary
spacing and orientation, and registered pairs with a known world transform.

Text format (one directive per line, ``#`` starts a comment)::

    seed 7
    noise 0.02
    ellipsoid cx cy cz rx ry rz intensity label
    sphere cx cy cz r intensity label
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from coords import WorldAffine, apply_affine, grid_points
from errors import IoFailure, ParseError
from solvers import AffineTransform, KeypointSet, TpsTransform, invert_points, solve_tps
from warp import Volume, WorldTransform
from worker_pool import WorkerPool, resolve_pool

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

SUPERSAMPLE_OFFSETS = (-0.25, 0.25)
LABEL_COVERAGE = 0.5
DEFAULT_PAD_MM = 10.0

# grid axis a samples world axis ORIENTATIONS[name][a]
ORIENTATIONS = {
    "axial": (0, 1, 2),
    "coronal": (2, 1, 0),
    "sagittal": (1, 0, 2),
}


class PhantomShape(BaseModel):
    """Axis-aligned world ellipsoid."""

    center: Vec3
    radii: Vec3
    intensity: float
    label: int = Field(ge=1)

    @field_validator("radii")
    @classmethod
    def _positive(cls, radii: Vec3) -> Vec3:
        if min(radii) <= 0:
            raise ValueError("radii must be > 0")
        return radii


class PhantomSpec(BaseModel):
    shapes: List[PhantomShape] = Field(min_length=1)
    noise_sigma: float = Field(default=0.0, ge=0.0)
    rng_seed: int = 0

    @field_validator("shapes")
    @classmethod
    def _unique_labels(cls, shapes: List[PhantomShape]) -> List[PhantomShape]:
        labels = [s.label for s in shapes]
        if len(set(labels)) != len(labels):
            raise ValueError("shape labels must be unique")
        return shapes

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.shapes], dtype=np.float64)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.min([np.subtract(s.center, s.radii) for s in self.shapes], axis=0)
        hi = np.max([np.add(s.center, s.radii) for s in self.shapes], axis=0)
        return lo, hi


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """A rendered pair and the world transform (moving -> fixed) relating them."""

    world_transform: WorldTransform
    moving: Volume
    fixed: Volume
    moving_keypoints: KeypointSet
    fixed_keypoints: KeypointSet

    @property
    def true_keypoints(self) -> Tuple[KeypointSet, KeypointSet]:
        return self.moving_keypoints, self.fixed_keypoints


# ----------------------------------------------------------------------------
# Geometry
# ----------------------------------------------------------------------------

def orientation_affine(
    spacing: Sequence[float],
    orientation: str = "axial",
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> WorldAffine:
    """Axis-permutation affine: grid axis a steps ``spacing[a]`` mm along its world axis."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}; expected one of {sorted(ORIENTATIONS)}")
    linear = np.zeros((3, 3))
    for a, w in enumerate(ORIENTATIONS[orientation]):
        linear[w, a] = float(spacing[a])
    return WorldAffine.from_parts(linear, origin)


def _corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def field_of_view(
    spec: PhantomSpec,
    g: Optional[WorldTransform] = None,
    pad_mm: float = DEFAULT_PAD_MM,
) -> Tuple[np.ndarray, np.ndarray]:
    """World bounding box of every shape (mapped through ``g``) padded by ``pad_mm``."""
    boxes = [_corners(np.subtract(s.center, s.radii), np.add(s.center, s.radii)) for s in spec.shapes]
    pts = np.vstack(boxes)
    if g is not None:
        pts = g(pts)
    return pts.min(axis=0) - pad_mm, pts.max(axis=0) + pad_mm


def grid_for(
    lo: np.ndarray,
    hi: np.ndarray,
    spacing: Sequence[float],
    orientation: str = "axial",
) -> Tuple[Tuple[int, int, int], WorldAffine]:
    """Dims and affine of a grid covering the world box, centred on it."""
    perm = ORIENTATIONS[orientation]
    extent = np.asarray(hi) - np.asarray(lo)
    dims = tuple(int(math.ceil(extent[perm[a]] / float(spacing[a]))) + 1 for a in range(3))
    linear = orientation_affine(spacing, orientation).linear
    center = (np.asarray(lo) + np.asarray(hi)) / 2.0
    origin = center - linear @ ((np.asarray(dims, dtype=np.float64) - 1.0) / 2.0)
    return dims, WorldAffine.from_parts(linear, origin)


# ----------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------

def _inside(shape: PhantomShape, world: np.ndarray) -> np.ndarray:
    d = (world - np.asarray(shape.center)) / np.asarray(shape.radii)
    return (d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2) <= 1.0


def analytic_field(spec: PhantomSpec, world: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free (intensity, label) at world points, without antialiasing."""
    world = np.asarray(world, dtype=np.float64)
    values = np.zeros(world.shape[:-1])
    labels = np.zeros(world.shape[:-1], dtype=np.int32)
    for shape in spec.shapes:
        inside = _inside(shape, world)
        values[inside] = shape.intensity
        labels[inside] = shape.label
    return values, labels


def render(
    spec: PhantomSpec,
    dims: Sequence[int],
    affine: WorldAffine,
    g: Optional[WorldTransform] = None,
    seed_offset: int = 0,
    pool: Optional[WorkerPool] = None,
) -> Volume:
    """Rasterise ``spec`` (optionally displaced by ``g``) onto a voxel grid.

    Each voxel averages 2x2x2 sub-samples at +-0.25 voxel; shapes are painted
    in order, and a voxel takes a shape's label once half of it is covered.
    Noise is N(0, noise_sigma) from ``rng_seed + seed_offset``.
    """
    dims = tuple(int(d) for d in dims)
    affine = affine if isinstance(affine, WorldAffine) else WorldAffine(affine)
    pool = resolve_pool(pool, 1)
    offsets = [np.array([a, b, c]) for a in SUPERSAMPLE_OFFSETS for b in SUPERSAMPLE_OFFSETS for c in SUPERSAMPLE_OFFSETS]

    def slab(start: int, stop: int) -> np.ndarray:
        vox = grid_points(dims, start, stop)
        coverage = np.zeros((len(spec.shapes),) + vox.shape[:-1])
        for off in offsets:
            world = apply_affine(affine.matrix, vox + off)
            if g is not None:
                world = invert_points(g, world)
            for s, shape in enumerate(spec.shapes):
                coverage[s] += _inside(shape, world)
        coverage /= len(offsets)
        value = np.zeros(vox.shape[:-1])
        label = np.zeros(vox.shape[:-1])
        for s, shape in enumerate(spec.shapes):
            f = coverage[s]
            value = value * (1.0 - f) + shape.intensity * f
            label[f >= LABEL_COVERAGE] = shape.label
        return np.stack([value, label], axis=-1)

    out = pool.map_slabs(slab, dims[0])
    data = out[..., 0]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed + seed_offset)
        data = data + rng.normal(0.0, spec.noise_sigma, size=dims)
    logger.debug("rendered %d shapes on %s", len(spec.shapes), dims)
    return Volume(data.astype(np.float32), affine, out[..., 1].astype(np.int32))


def make_pair(
    spec: PhantomSpec,
    g: WorldTransform,
    spacing_m: Sequence[float],
    spacing_f: Sequence[float],
    orientation_f: str = "axial",
    orientation_m: str = "axial",
    pad_mm: float = DEFAULT_PAD_MM,
    pool: Optional[WorkerPool] = None,
) -> GroundTruth:
    """Moving phantom at ``spacing_m`` and its image under ``g`` at ``spacing_f``.

    True keypoints are the shape centres and their images under ``g``.
    """
    dims_m, affine_m = grid_for(*field_of_view(spec, None, pad_mm), spacing_m, orientation_m)
    dims_f, affine_f = grid_for(*field_of_view(spec, g, pad_mm), spacing_f, orientation_f)
    moving = render(spec, dims_m, affine_m, pool=pool)
    fixed = render(spec, dims_f, affine_f, g=g, seed_offset=1, pool=pool)
    centers = spec.centers
    km = KeypointSet.uniform(centers)
    kf = KeypointSet.uniform(g(centers))
    logger.info("phantom pair: moving %s (%s), fixed %s (%s)", dims_m, orientation_m, dims_f, orientation_f)
    return GroundTruth(g, moving, fixed, km, kf)


def mild_tps(
    spec: PhantomSpec,
    max_displacement_mm: float = 5.0,
    seed: int = 0,
    lam: float = 0.01,
    pad_mm: float = DEFAULT_PAD_MM,
) -> TpsTransform:
    """Bounded non-linear ground truth (moving -> fixed).

    Shape centres move by random offsets of at most ``max_displacement_mm``;
    the corners of the padded field of view stay put as anchors.
    """
    rng = np.random.default_rng(seed)
    centers = spec.centers
    direction = rng.normal(size=centers.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    magnitude = rng.uniform(0.5, 1.0, size=(len(centers), 1)) * max_displacement_mm
    anchors = _corners(*field_of_view(spec, None, pad_mm))
    src = np.vstack([centers, anchors])
    dst = np.vstack([centers + direction * magnitude, anchors])
    return solve_tps(KeypointSet.uniform(src), KeypointSet.uniform(dst), lam)


def translation(offset: Sequence[float]) -> AffineTransform:
    m = np.eye(4)
    m[:3, 3] = offset
    return AffineTransform(m)


# ----------------------------------------------------------------------------
# Text format
# ----------------------------------------------------------------------------

def _numbers(tokens: List[str], raw: str, lineno: int) -> List[float]:
    out = []
    for tok in tokens:
        try:
            out.append(float(tok))
        except ValueError:
            raise ParseError(f"{tok!r} is not a number", lineno, raw.index(tok) + 1) from None
    return out


def _label(tok: str, raw: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"label {tok!r} is not an integer", lineno, raw.rindex(tok) + 1) from None


def parse_spec(text: str) -> PhantomSpec:
    shapes: List[PhantomShape] = []
    seed = 0
    noise = 0.0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            if key == "seed":
                if len(args) != 1:
                    raise ParseError("seed takes one integer", lineno, 1)
                try:
                    seed = int(args[0])
                except ValueError:
                    raise ParseError(f"seed {args[0]!r} is not an integer", lineno, raw.index(args[0]) + 1) from None
            elif key == "noise":
                if len(args) != 1:
                    raise ParseError("noise takes one value", lineno, 1)
                noise = _numbers(args, raw, lineno)[0]
                if noise < 0:
                    raise ParseError("noise must be >= 0", lineno, raw.index(args[0]) + 1)
            elif key == "ellipsoid":
                if len(args) != 8:
                    raise ParseError(f"ellipsoid takes 8 values (cx cy cz rx ry rz intensity label), got {len(args)}", lineno, 1)
                v = _numbers(args[:7], raw, lineno)
                shapes.append(PhantomShape(center=v[0:3], radii=v[3:6], intensity=v[6], label=_label(args[7], raw, lineno)))
            elif key == "sphere":
                if len(args) != 6:
                    raise ParseError(f"sphere takes 6 values (cx cy cz r intensity label), got {len(args)}", lineno, 1)
                v = _numbers(args[:5], raw, lineno)
                shapes.append(PhantomShape(center=v[0:3], radii=(v[3],) * 3, intensity=v[4], label=_label(args[5], raw, lineno)))
            else:
                raise ParseError(f"unknown directive {key!r}", lineno, raw.index(key) + 1)
        except ValidationError as exc:
            raise ParseError(exc.errors()[0]["msg"], lineno, 1) from None
    try:
        return PhantomSpec(shapes=shapes, noise_sigma=noise, rng_seed=seed)
    except ValidationError as exc:
        raise ParseError(exc.errors()[0]["msg"]) from None


def format_spec(spec: PhantomSpec) -> str:
    lines = [f"seed {spec.rng_seed}", f"noise {spec.noise_sigma!r}"]
    for s in spec.shapes:
        values = [*s.center, *s.radii, s.intensity]
        lines.append("ellipsoid " + " ".join(repr(float(v)) for v in values) + f" {s.label}")
    return "\n".join(lines) + "\n"


def read_spec(path: Union[str, Path]) -> PhantomSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read phantom spec {path}: {exc}") from exc
    return parse_spec(text)
