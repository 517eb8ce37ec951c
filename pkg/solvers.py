"""Solvers Module - keyreg

Closed-form transforms from corresponding weighted keypoints in world
coordinates:

- weighted affine:  T = Kf C Km^T (Km C Km^T)^-1 with homogeneous keypoints
- rigid:            affine solve with its linear block orthogonalised
- thin-plate spline with 3-D kernel U(r) = r and rigidity lambda

Every transform maps world millimetres to world millimetres.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from coords import WorldAffine, apply_affine, invert as invert_affine
from errors import DegenerateConfiguration

logger = logging.getLogger(__name__)

MIN_KEYPOINTS = 4
RANK_TOL = 1e-10
MIN_POINT_SEPARATION = 1e-9


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """N world points (mm) with positive confidences."""

    points: np.ndarray
    confidences: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        conf = np.array(self.confidences, dtype=np.float64).reshape(-1)
        if len(pts) < MIN_KEYPOINTS:
            raise ValueError(f"need at least {MIN_KEYPOINTS} keypoints, got {len(pts)}")
        if conf.shape != (len(pts),):
            raise ValueError(f"{len(pts)} points but {conf.size} confidences")
        if not np.all(np.isfinite(pts)):
            raise ValueError("keypoints must be finite")
        if not np.all(conf > 0):
            raise ValueError("confidences must be strictly positive")
        pts.setflags(write=False)
        conf.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidences", conf)

    @classmethod
    def uniform(cls, points) -> "KeypointSet":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(pts, np.ones(len(pts)))

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points) -> "KeypointSet":
        return KeypointSet(points, self.confidences)

    def subset(self, index) -> "KeypointSet":
        return KeypointSet(self.points[index], self.confidences[index])


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Homogeneous world->world affine (moving -> fixed when produced by a solve)."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        # WorldAffine enforces shape, finiteness and the pinned last row
        object.__setattr__(self, "matrix", WorldAffine(self.matrix).matrix)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        return type(self)(invert_affine(WorldAffine(self.matrix)).matrix)

    def __call__(self, points) -> np.ndarray:
        return apply_affine(self.matrix, points)


class RigidTransform(AffineTransform):
    """Affine whose linear block is a proper rotation."""


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """Thin-plate spline: affine part plus radial warps at control points."""

    control_points: np.ndarray
    affine_part: np.ndarray
    warp_coefficients: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        cp = np.array(self.control_points, dtype=np.float64).reshape(-1, 3)
        w = np.array(self.warp_coefficients, dtype=np.float64).reshape(-1, 3)
        if w.shape != cp.shape:
            raise ValueError(f"{len(cp)} control points but {len(w)} coefficient rows")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        for arr in (cp, w):
            arr.setflags(write=False)
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "warp_coefficients", w)
        object.__setattr__(self, "affine_part", WorldAffine(self.affine_part).matrix)
        object.__setattr__(self, "lam", float(self.lam))

    def __call__(self, points) -> np.ndarray:
        return eval_tps(self, points)


Transform = Union[AffineTransform, TpsTransform]


# ----------------------------------------------------------------------------
# Affine / rigid
# ----------------------------------------------------------------------------

def _homogeneous(points: np.ndarray) -> np.ndarray:
    """Stack points as columns of a 4xN matrix with a trailing row of ones."""
    return np.vstack([points.T, np.ones(len(points))])


def _pair_weights(moving: KeypointSet, fixed: KeypointSet, weighted: bool) -> np.ndarray:
    if len(moving) != len(fixed):
        raise ValueError(f"keypoint counts differ: {len(moving)} moving vs {len(fixed)} fixed")
    if not weighted:
        return np.ones(len(moving))
    return moving.confidences * fixed.confidences


def _check_rank(system: np.ndarray, what: str) -> None:
    s = linalg.svdvals(system)
    if s[0] == 0 or s[-1] / s[0] <= RANK_TOL:
        ratio = 0.0 if s[0] == 0 else s[-1] / s[0]
        raise DegenerateConfiguration(
            f"{what} is numerically singular (relative smallest singular value {ratio:.3e}); "
            "keypoints are coplanar or coincident"
        )
    logger.debug("%s condition number %.3e", what, s[0] / s[-1])


def solve_affine_weighted(moving: KeypointSet, fixed: KeypointSet, weighted: bool = True) -> AffineTransform:
    """Affine T minimising sum_i c_i ||k_i^f - T k_i^m||^2 with c_i = c_i^m c_i^f.

    ``weighted=False`` uses unit weights (C = I).
    """
    c = _pair_weights(moving, fixed, weighted)
    km = _homogeneous(moving.points)
    kf = _homogeneous(fixed.points)
    kmc = km * c
    system = kmc @ km.T
    _check_rank(system, "affine normal matrix")
    rhs = kf @ kmc.T
    # T system = rhs  <=>  system^T T^T = rhs^T ; system is symmetric
    t = linalg.solve(system, rhs.T, assume_a="sym").T
    t[3] = (0.0, 0.0, 0.0, 1.0)
    return AffineTransform(t)


def _proper_polar(linear: np.ndarray) -> np.ndarray:
    u, _ = linalg.polar(linear)
    if np.linalg.det(u) < 0:
        # nearest rotation when the fit contains a reflection
        a, _, bt = linalg.svd(linear)
        d = np.diag([1.0, 1.0, -1.0])
        u = a @ d @ bt
    return u


def solve_rigid_weighted(moving: KeypointSet, fixed: KeypointSet, weighted: bool = True) -> RigidTransform:
    """Rigid map from the polar factor of the weighted affine solution."""
    affine = solve_affine_weighted(moving, fixed, weighted)
    rotation = _proper_polar(affine.linear)
    c = _pair_weights(moving, fixed, weighted)
    cm = np.average(moving.points, axis=0, weights=c)
    cf = np.average(fixed.points, axis=0, weights=c)
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = cf - rotation @ cm
    return RigidTransform(m)


# ----------------------------------------------------------------------------
# Thin-plate spline
# ----------------------------------------------------------------------------

def tps_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """U(||a_i - b_j||) = ||a_i - b_j|| for every pair."""
    return cdist(a, b)


def solve_tps(
    moving: KeypointSet,
    fixed: KeypointSet,
    lam: float,
    weighted: bool = True,
) -> TpsTransform:
    """Regularised TPS taking moving keypoints onto fixed keypoints.

    Solves  (K - lam D) w + P a = Y,  P^T w = 0  with D = diag(1 / c_i).
    With U(r) = r the kernel is conditionally negative definite, so the
    ridge enters with a negative sign; the bending energy is -w^T K w.
    The system is reduced onto the null space of P^T (QR of P), which stays
    well conditioned from lam = 0 up to the affine limit.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    c = _pair_weights(moving, fixed, weighted)
    x = moving.points
    y = fixed.points
    n = len(x)

    if lam == 0 and n > 1 and pdist(x).min() <= MIN_POINT_SEPARATION:
        raise DegenerateConfiguration("interpolating TPS needs distinct control points (pairwise distance <= 1e-9 mm)")

    p = np.hstack([np.ones((n, 1)), x])
    q, r = linalg.qr(p)
    _check_rank(r[:4, :4], "TPS polynomial block")
    q1, q2 = q[:, :4], q[:, 4:]

    m = tps_kernel(x, x) - lam * np.diag(1.0 / c)
    if q2.shape[1]:
        reduced = q2.T @ m @ q2
        _check_rank(reduced, "TPS bending system")
        w = q2 @ linalg.solve(reduced, q2.T @ y, assume_a="sym")
    else:
        w = np.zeros((n, 3))

    # P a = y - M w lies in range(P) by construction
    a = linalg.solve_triangular(r[:4, :4], q1.T @ (y - m @ w))
    affine = np.eye(4)
    affine[:3, :3] = a[1:].T
    affine[:3, 3] = a[0]
    logger.debug("TPS solved: n=%d lambda=%g |w|=%.3e", n, lam, float(np.abs(w).max()))
    return TpsTransform(x, affine, w, lam)


def eval_tps(t: TpsTransform, points) -> np.ndarray:
    """affine_part p + sum_i w_i ||p - c_i|| for points of shape (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    out = apply_affine(t.affine_part, p)
    # one control point at a time keeps each output element's arithmetic
    # independent of how the points are batched
    for ci, wi in zip(t.control_points, t.warp_coefficients):
        d = p - ci
        r = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
        out[..., 0] += wi[0] * r
        out[..., 1] += wi[1] * r
        out[..., 2] += wi[2] * r
    return out


def tps_bending_energy(t: TpsTransform) -> float:
    """Bending energy sum over output axes of w^T (-K) w; zero for affine fits."""
    k = tps_kernel(t.control_points, t.control_points)
    w = t.warp_coefficients
    energy = -float(np.einsum("ia,ij,ja->", w, k, w))
    return max(energy, 0.0)


def invert_points(t: Transform, points, iterations: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Pre-images of ``points`` under ``t``.

    Affine maps are inverted exactly; TPS maps by the fixed-point iteration
    x <- x + (p - t(x)), which converges for mild deformations.
    """
    p = np.asarray(points, dtype=np.float64)
    if isinstance(t, AffineTransform):
        return t.inverse()(p)
    x = p.copy()
    for _ in range(iterations):
        step = p - t(x)
        x += step
        if np.max(np.abs(step), initial=0.0) < tol:
            break
    return x


def apply(t: Transform, points) -> np.ndarray:
    """Apply any transform to an (..., 3) array of world points."""
    return t(points)


def solve_transform(
    kind: str,
    moving: KeypointSet,
    fixed: KeypointSet,
    lam: Optional[float] = None,
    weighted: bool = True,
) -> Transform:
    """Dispatch by transform kind: "rigid", "affine" or "tps"."""
    if kind == "affine":
        return solve_affine_weighted(moving, fixed, weighted)
    if kind == "rigid":
        return solve_rigid_weighted(moving, fixed, weighted)
    if kind == "tps":
        if lam is None:
            raise ValueError("tps requires a lambda")
        return solve_tps(moving, fixed, lam, weighted)
    raise ValueError(f"unknown transform kind: {kind}")
