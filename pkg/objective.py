"""Objective Module - keyreg

Pairwise similarity objective for a keypoint solution, and a derivative-free
refinement of keypoint positions against it.

The objective is "higher is better": each requested term is weighted and
summed, with MSE entering negated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from errors import DegenerateConfiguration, MissingLabels, SingularAffine
from metrics import mse, soft_dice, ssim
from solvers import KeypointSet, Transform, apply
from warp import Volume, registration_transform, warp_labels_soft, warp_to_fixed_grid
from worker_pool import WorkerPool, ordered_argmax, resolve_pool

logger = logging.getLogger(__name__)

LAMBDA_MIN = 0.001
LAMBDA_MAX = 100.0

Term = Literal["mse", "ssim", "dice"]


class SimilarityConfig(BaseModel):
    """Weighted similarity terms and the transform family they are scored under.

    ``tps_lambda`` is either a fixed rigidity or a ``(lo, hi)`` range sampled
    log-uniformly once per run.
    """

    terms: Dict[Term, float] = Field(default_factory=lambda: {"ssim": 1.0, "dice": 1.0})
    transform: Literal["rigid", "affine", "tps"] = "affine"
    tps_lambda: Optional[Union[float, Tuple[float, float]]] = None
    weighted: bool = True
    data_range: Optional[float] = Field(default=None, gt=0.0)

    @field_validator("terms")
    @classmethod
    def _positive_weights(cls, terms: Dict[str, float]) -> Dict[str, float]:
        if not terms:
            raise ValueError("at least one similarity term is required")
        for name, weight in terms.items():
            if not weight > 0:
                raise ValueError(f"weight of {name} must be > 0, got {weight}")
        return terms

    @field_validator("tps_lambda")
    @classmethod
    def _lambda_range(cls, lam):
        if lam is None:
            return lam
        if isinstance(lam, tuple):
            lo, hi = lam
            if not (LAMBDA_MIN <= lo <= hi <= LAMBDA_MAX):
                raise ValueError(f"lambda range must satisfy {LAMBDA_MIN} <= lo <= hi <= {LAMBDA_MAX}")
        elif lam < 0:
            raise ValueError("lambda must be >= 0")
        return lam

    @model_validator(mode="after")
    def _tps_needs_lambda(self) -> "SimilarityConfig":
        if self.transform == "tps" and self.tps_lambda is None:
            raise ValueError("tps transform requires tps_lambda")
        return self

    def without_labels(self) -> "SimilarityConfig":
        """Copy with the dice term removed (falls back to ssim if nothing remains)."""
        terms = {k: v for k, v in self.terms.items() if k != "dice"} or {"ssim": 1.0}
        return self.model_copy(update={"terms": terms})


class RefinementConfig(BaseModel):
    max_iters: int = Field(default=30, ge=1)
    step_mm: float = Field(default=2.0, gt=0.0)
    min_step_mm: float = Field(default=0.125, gt=0.0)
    tol: float = Field(default=1e-6, gt=0.0)
    rng_seed: int = 0
    which: Literal["moving", "fixed", "both"] = "moving"


@dataclass
class RefinementResult:
    moving: KeypointSet
    fixed: KeypointSet
    objective: float
    trace: List[float] = field(default_factory=list)
    accepted_steps: int = 0
    lam: Optional[float] = None

    def __iter__(self):
        # unpacks as (moving, fixed, objective)
        return iter((self.moving, self.fixed, self.objective))


def sample_lambda(lam_range: Tuple[float, float], rng: np.random.Generator) -> float:
    """Log-uniform draw from ``[lo, hi]``."""
    lo, hi = lam_range
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def resolve_lambda(cfg: SimilarityConfig, rng: Optional[np.random.Generator] = None) -> Optional[float]:
    if cfg.transform != "tps":
        return None
    if isinstance(cfg.tps_lambda, tuple):
        return sample_lambda(cfg.tps_lambda, rng if rng is not None else np.random.default_rng(0))
    return float(cfg.tps_lambda)


def _dice_labels(moving: Volume, fixed: Volume) -> List[int]:
    return sorted(set(moving.label_ids()) | set(fixed.label_ids()))


def score_transform(
    moving: Volume,
    fixed: Volume,
    t: Transform,
    cfg: SimilarityConfig,
    pool: Optional[WorkerPool] = None,
) -> float:
    """Weighted similarity of ``moving`` warped by ``t`` against ``fixed``."""
    pool = resolve_pool(pool, 1)
    warped = warp_to_fixed_grid(moving.with_labels(None), fixed, t, pool=pool)
    total = 0.0
    for name, weight in cfg.terms.items():
        if name == "mse":
            value = -mse(warped, fixed)
        elif name == "ssim":
            value = ssim(warped, fixed, cfg.data_range)
        else:
            labels = _dice_labels(moving, fixed)
            soft = warp_labels_soft(moving, fixed, t, labels, pool=pool)
            dice = soft_dice(soft, fixed.labels, labels)
            value = float(np.mean(list(dice.values()))) if dice else 0.0
        total += weight * value
    return total


def eval_objective(
    moving: Volume,
    fixed: Volume,
    km: KeypointSet,
    kf: KeypointSet,
    cfg: SimilarityConfig,
    lam: Optional[float] = None,
    pool: Optional[WorkerPool] = None,
) -> float:
    """Solve the transform from ``km``/``kf``, warp, and score. Higher is better."""
    if "dice" in cfg.terms and (moving.labels is None or fixed.labels is None):
        raise MissingLabels("the dice term needs label grids on both volumes")
    if lam is None:
        lam = resolve_lambda(cfg)
    t = registration_transform(cfg.transform, km, kf, lam, cfg.weighted)
    return score_transform(moving, fixed, t, cfg, pool)


def keypoint_transfer_error(t: Transform, km: KeypointSet, kf: KeypointSet) -> float:
    """Mean world distance (mm) between t(moving keypoints) and fixed keypoints."""
    return float(np.mean(np.linalg.norm(apply(t, km.points) - kf.points, axis=1)))


def _candidates(n: int, sides: Tuple[str, ...]) -> List[Tuple[str, int, int, float]]:
    # tie order: keypoint index, then axis, then negative direction
    return [(side, i, axis, sign) for side in sides for i in range(n) for axis in range(3) for sign in (-1.0, 1.0)]


def refine_keypoints(
    moving: Volume,
    fixed: Volume,
    init_km: KeypointSet,
    init_kf: KeypointSet,
    scfg: SimilarityConfig,
    rcfg: RefinementConfig,
    pool: Optional[WorkerPool] = None,
) -> RefinementResult:
    """Coordinate-wise pattern search over keypoint world coordinates.

    Every iteration scores all +-step moves of every coordinate and takes the
    best one if it gains more than ``tol``; otherwise the step halves. Stops
    after ``max_iters`` iterations or once the step falls below
    ``min_step_mm``. Confidences stay fixed and the trace never decreases.
    """
    if "dice" in scfg.terms and (moving.labels is None or fixed.labels is None):
        raise MissingLabels("the dice term needs label grids on both volumes")
    pool = resolve_pool(pool, 1)
    inner = WorkerPool(1)
    rng = np.random.default_rng(rcfg.rng_seed)
    lam = resolve_lambda(scfg, rng)
    sides = ("moving", "fixed") if rcfg.which == "both" else (rcfg.which,)

    current = {"moving": init_km, "fixed": init_kf}
    best = eval_objective(moving, fixed, init_km, init_kf, scfg, lam, pool)
    trace = [best]
    accepted = 0
    step = rcfg.step_mm
    moves = _candidates(len(init_km), sides)

    def score(move: Tuple[str, int, int, float]) -> float:
        side, i, axis, sign = move
        points = current[side].points.copy()
        points[i, axis] += sign * step
        trial = dict(current)
        trial[side] = current[side].with_points(points)
        try:
            return eval_objective(moving, fixed, trial["moving"], trial["fixed"], scfg, lam, inner)
        except (DegenerateConfiguration, SingularAffine):
            return -math.inf

    for iteration in range(rcfg.max_iters):
        values = pool.map(score, moves)
        k = ordered_argmax(values)
        if values[k] - best > rcfg.tol:
            side, i, axis, sign = moves[k]
            points = current[side].points.copy()
            points[i, axis] += sign * step
            current[side] = current[side].with_points(points)
            best = values[k]
            accepted += 1
            logger.debug("iter %d: moved %s[%d] axis %d by %+.3f mm -> %.6f", iteration, side, i, axis, sign * step, best)
        else:
            step /= 2.0
        trace.append(best)
        if step < rcfg.min_step_mm:
            break

    logger.info("refinement finished: objective %.6f after %d accepted steps", best, accepted)
    return RefinementResult(current["moving"], current["fixed"], best, trace, accepted, lam)
