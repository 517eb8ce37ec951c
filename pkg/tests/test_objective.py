"""Tests for the similarity objective and pattern-search refinement."""

import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import MissingLabels
from objective import (
    RefinementConfig,
    SimilarityConfig,
    eval_objective,
    keypoint_transfer_error,
    refine_keypoints,
    resolve_lambda,
    sample_lambda,
)
from phantom import PhantomShape, PhantomSpec, make_pair, read_spec, translation
from solvers import solve_affine_weighted
from worker_pool import WorkerPool

SPEC = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "quickstart_phantom.txt")


def small_pair():
    centers = [(x, y, z) for x in (-6, 6) for y in (-6, 6) for z in (-6, 6)]
    shapes = [
        PhantomShape(center=c, radii=(3.0, 3.0, 3.0), intensity=0.5 + 0.06 * i, label=i + 1)
        for i, c in enumerate(centers)
    ]
    spec = PhantomSpec(shapes=shapes)
    return make_pair(spec, translation((3.0, -2.0, 1.0)), (2.0, 2.0, 2.0), (2.0, 2.0, 2.0))


class TestSimilarityConfig:
    """Validation of objective settings."""

    def test_defaults(self):
        cfg = SimilarityConfig()
        assert cfg.terms == {"ssim": 1.0, "dice": 1.0}
        assert cfg.transform == "affine"

    def test_tps_requires_lambda(self):
        with pytest.raises(ValidationError):
            SimilarityConfig(transform="tps")

    def test_lambda_range_bounds(self):
        with pytest.raises(ValidationError):
            SimilarityConfig(transform="tps", tps_lambda=(0.0001, 1.0))
        with pytest.raises(ValidationError):
            SimilarityConfig(transform="tps", tps_lambda=(5.0, 1.0))

    def test_non_positive_weight(self):
        with pytest.raises(ValidationError):
            SimilarityConfig(terms={"ssim": 0.0})

    def test_unknown_term(self):
        with pytest.raises(ValidationError):
            SimilarityConfig(terms={"ncc": 1.0})

    def test_without_labels(self):
        assert SimilarityConfig().without_labels().terms == {"ssim": 1.0}
        assert SimilarityConfig(terms={"dice": 2.0}).without_labels().terms == {"ssim": 1.0}
        assert SimilarityConfig(terms={"mse": 1.0, "dice": 1.0}).without_labels().terms == {"mse": 1.0}


class TestLambda:
    """TPS rigidity selection."""

    def test_sample_in_range(self):
        rng = np.random.default_rng(0)
        draws = [sample_lambda((0.01, 10.0), rng) for _ in range(200)]
        assert all(0.01 <= d <= 10.0 for d in draws)

    def test_sample_reproducible(self):
        a = sample_lambda((0.001, 100.0), np.random.default_rng(9))
        b = sample_lambda((0.001, 100.0), np.random.default_rng(9))
        assert a == b

    def test_degenerate_range(self):
        assert sample_lambda((0.5, 0.5), np.random.default_rng(0)) == 0.5

    def test_resolve(self):
        assert resolve_lambda(SimilarityConfig()) is None
        assert resolve_lambda(SimilarityConfig(transform="tps", tps_lambda=0.3)) == 0.3
        ranged = SimilarityConfig(transform="tps", tps_lambda=(0.1, 1.0))
        assert resolve_lambda(ranged) == resolve_lambda(ranged)


class TestEvalObjective:
    """Scoring keypoint solutions."""

    def setup_method(self):
        self.truth = small_pair()
        self.km, self.kf = self.truth.true_keypoints

    def test_true_keypoints_beat_perturbed(self):
        cfg = SimilarityConfig()
        good = eval_objective(self.truth.moving, self.truth.fixed, self.km, self.kf, cfg)
        pts = self.km.points.copy()
        pts[0] += (4.0, 0.0, 0.0)
        pts[5] += (0.0, -4.0, 3.0)
        bad = eval_objective(self.truth.moving, self.truth.fixed, self.km.with_points(pts), self.kf, cfg)
        assert good > bad

    def test_mse_term_is_negated(self):
        cfg = SimilarityConfig(terms={"mse": 1.0})
        value = eval_objective(self.truth.moving, self.truth.fixed, self.km, self.kf, cfg)
        assert value <= 0.0

    def test_identical_volumes_mse_zero(self):
        vol = self.truth.moving
        cfg = SimilarityConfig(terms={"mse": 1.0})
        assert eval_objective(vol, vol, self.km, self.km, cfg) == pytest.approx(0.0, abs=1e-10)

    def test_dice_without_labels(self):
        with pytest.raises(MissingLabels):
            eval_objective(self.truth.moving.with_labels(None), self.truth.fixed, self.km, self.kf, SimilarityConfig())

    def test_tps_objective(self):
        cfg = SimilarityConfig(transform="tps", tps_lambda=0.01)
        value = eval_objective(self.truth.moving, self.truth.fixed, self.km, self.kf, cfg)
        assert 0.0 < value <= 2.0

    def test_transfer_error(self):
        t = solve_affine_weighted(self.km, self.kf)
        assert keypoint_transfer_error(t, self.km, self.kf) < 1e-9


class TestRefinement:
    """Coordinate-wise pattern search."""

    def setup_method(self):
        self.truth = small_pair()
        km, self.kf = self.truth.true_keypoints
        pts = km.points.copy()
        pts[2, 1] += 2.0
        self.start = km.with_points(pts)

    def test_trace_is_monotone(self):
        result = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf,
            SimilarityConfig(), RefinementConfig(max_iters=4),
        )
        assert all(b >= a for a, b in zip(result.trace, result.trace[1:]))
        assert result.objective == result.trace[-1]
        assert len(result.trace) <= 5

    def test_improves_perturbed_start(self):
        result = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf,
            SimilarityConfig(), RefinementConfig(max_iters=3),
        )
        assert result.accepted_steps >= 1
        assert result.trace[-1] > result.trace[0]

    def test_confidences_and_other_side_fixed(self):
        result = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf,
            SimilarityConfig(), RefinementConfig(max_iters=2),
        )
        assert np.array_equal(result.moving.confidences, self.start.confidences)
        assert np.array_equal(result.fixed.points, self.kf.points)

    def test_refine_fixed_side(self):
        result = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf,
            SimilarityConfig(), RefinementConfig(max_iters=2, which="fixed"),
        )
        assert np.array_equal(result.moving.points, self.start.points)

    def test_deterministic_across_threads(self):
        cfg = RefinementConfig(max_iters=2)
        a = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf, SimilarityConfig(), cfg, pool=WorkerPool(1)
        )
        b = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf, SimilarityConfig(), cfg, pool=WorkerPool(4)
        )
        assert np.array_equal(a.moving.points, b.moving.points)
        assert a.trace == b.trace

    def test_step_floor_stops_early(self):
        """A first step already below the floor ends after one iteration."""
        result = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf,
            SimilarityConfig(terms={"ssim": 1.0}), RefinementConfig(max_iters=10, step_mm=0.2, min_step_mm=0.15, tol=10.0),
        )
        assert result.accepted_steps == 0
        assert len(result.trace) == 2

    def test_unpacks(self):
        moving, fixed, value = refine_keypoints(
            self.truth.moving, self.truth.fixed, self.start, self.kf,
            SimilarityConfig(terms={"mse": 1.0}), RefinementConfig(max_iters=1),
        )
        assert len(moving) == len(fixed) == 8
        assert value <= 0.0

    def test_recovers_from_perturbed_keypoints(self):
        """Every moving keypoint 3 mm off; the refined fit lands within 2 mm."""
        truth = make_pair(read_spec(SPEC), translation((10.0, -5.0, 3.0)), (2.0, 2.0, 2.0), (2.0, 2.0, 2.0))
        km, kf = truth.true_keypoints
        rng = np.random.default_rng(11)
        direction = rng.normal(size=km.points.shape)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        start = km.with_points(km.points + 3.0 * direction)

        result = refine_keypoints(
            truth.moving, truth.fixed, start, kf, SimilarityConfig(), RefinementConfig(max_iters=60), pool=WorkerPool(4)
        )
        before = keypoint_transfer_error(solve_affine_weighted(start, kf), km, kf)
        after = keypoint_transfer_error(solve_affine_weighted(result.moving, result.fixed), km, kf)
        assert after <= 2.0
        assert after < before
        assert all(b >= a for a, b in zip(result.trace, result.trace[1:]))
