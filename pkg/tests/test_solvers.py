"""Tests for the closed-form keypoint solvers."""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import DegenerateConfiguration
from solvers import (
    AffineTransform,
    KeypointSet,
    RigidTransform,
    TpsTransform,
    eval_tps,
    invert_points,
    solve_affine_weighted,
    solve_rigid_weighted,
    solve_tps,
    solve_transform,
    tps_bending_energy,
    tps_kernel,
)


def random_g(rng, cond_max=10.0):
    while True:
        m = np.eye(4)
        m[:3, :3] = rng.uniform(-2, 2, size=(3, 3))
        m[:3, 3] = rng.uniform(-20, 20, size=3)
        if np.linalg.cond(m[:3, :3]) < cond_max:
            return m


def apply_h(m, pts):
    return pts @ m[:3, :3].T + m[:3, 3]


def rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis /= np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


class TestKeypointSet:
    """KeypointSet invariants."""

    def test_needs_four_points(self):
        with pytest.raises(ValueError):
            KeypointSet(np.zeros((3, 3)), np.ones(3))

    def test_confidences_positive(self):
        with pytest.raises(ValueError):
            KeypointSet(np.eye(4, 3), np.array([1.0, 0.0, 1.0, 1.0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            KeypointSet(np.zeros((5, 3)), np.ones(4))

    def test_read_only(self):
        ks = KeypointSet.uniform(np.eye(4, 3))
        with pytest.raises(ValueError):
            ks.points[0, 0] = 3.0


class TestAffineSolver:
    """Weighted affine fit."""

    def test_identity(self):
        """moving = fixed gives the identity."""
        rng = np.random.default_rng(0)
        p = rng.uniform(-50, 50, size=(6, 3))
        t = solve_affine_weighted(KeypointSet.uniform(p), KeypointSet.uniform(p))
        assert np.allclose(t.matrix, np.eye(4), atol=1e-9)

    def test_translation(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(-50, 50, size=(6, 3))
        t = solve_affine_weighted(KeypointSet.uniform(p), KeypointSet.uniform(p + (5, -3, 2)))
        assert np.allclose(t.linear, np.eye(3), atol=1e-9)
        assert np.allclose(t.translation, (5, -3, 2), atol=1e-9)

    def test_exact_recovery_random(self):
        """100 random invertible G with random confidences are recovered."""
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(6, 65))
            g = random_g(rng)
            p = rng.uniform(-50, 50, size=(n, 3))
            cm = rng.uniform(0.1, 1.0, size=n)
            cf = rng.uniform(0.1, 1.0, size=n)
            t = solve_affine_weighted(KeypointSet(p, cm), KeypointSet(apply_h(g, p), cf))
            assert np.linalg.norm(t.matrix - g) / np.linalg.norm(g) < 1e-9

    def test_confidence_limit_matches_omission(self):
        """A pair with product confidence 1e-12 behaves as if it were absent."""
        rng = np.random.default_rng(3)
        p = rng.uniform(-50, 50, size=(10, 3))
        q = apply_h(random_g(rng), p) + rng.normal(scale=2.0, size=p.shape)
        c = np.ones(10)
        c[4] = 1e-12
        weighted = solve_affine_weighted(KeypointSet(p, c), KeypointSet.uniform(q))
        keep = np.arange(10) != 4
        omitted = solve_affine_weighted(KeypointSet.uniform(p[keep]), KeypointSet.uniform(q[keep]))
        assert np.linalg.norm(weighted.matrix - omitted.matrix) / np.linalg.norm(omitted.matrix) < 1e-6

    def test_uniform_scaling_invariance(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(-50, 50, size=(12, 3))
        q = p + rng.normal(scale=3.0, size=p.shape)
        c = rng.uniform(0.1, 1.0, size=12)
        a = solve_affine_weighted(KeypointSet(p, c), KeypointSet.uniform(q))
        b = solve_affine_weighted(KeypointSet(p, 37.0 * c), KeypointSet.uniform(q))
        assert np.allclose(a.matrix, b.matrix, atol=1e-9)

    def test_coplanar_is_degenerate(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(-50, 50, size=(8, 3))
        p[:, 2] = 4.0
        with pytest.raises(DegenerateConfiguration):
            solve_affine_weighted(KeypointSet.uniform(p), KeypointSet.uniform(p))

    def test_unweighted_ignores_confidences(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(-50, 50, size=(8, 3))
        q = p + rng.normal(scale=3.0, size=p.shape)
        a = solve_affine_weighted(KeypointSet(p, rng.uniform(0.1, 1, 8)), KeypointSet.uniform(q), weighted=False)
        b = solve_affine_weighted(KeypointSet.uniform(p), KeypointSet.uniform(q))
        assert np.allclose(a.matrix, b.matrix, atol=1e-9)

    def test_inverse(self):
        g = random_g(np.random.default_rng(7))
        t = AffineTransform(g)
        x = np.array([[1.0, 2.0, 3.0]])
        assert np.allclose(t.inverse()(t(x)), x)


class TestRigidSolver:
    """Rigid fit by polar decomposition."""

    def test_pure_rotation(self):
        """Rotation plus translation is recovered with an orthogonal linear block."""
        rng = np.random.default_rng(8)
        r = rotation((1, 2, 3), 0.4)
        p = rng.uniform(-40, 40, size=(10, 3))
        q = p @ r.T + (3, -1, 7)
        t = solve_rigid_weighted(KeypointSet.uniform(p), KeypointSet.uniform(q))
        assert isinstance(t, RigidTransform)
        assert np.allclose(t.linear @ t.linear.T, np.eye(3), atol=1e-6)
        assert np.isclose(np.linalg.det(t.linear), 1.0)
        assert np.allclose(t.linear, r, atol=1e-6)
        assert np.allclose(t.translation, (3, -1, 7), atol=1e-6)

    def test_scaled_input_stays_rotation(self):
        """A scaling fit is orthogonalised to the nearest rotation."""
        rng = np.random.default_rng(9)
        p = rng.uniform(-40, 40, size=(10, 3))
        t = solve_rigid_weighted(KeypointSet.uniform(p), KeypointSet.uniform(1.5 * p))
        assert np.allclose(t.linear, np.eye(3), atol=1e-9)

    def test_reflection_removed(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(-40, 40, size=(10, 3))
        q = p * (1.0, 1.0, -1.0)
        t = solve_rigid_weighted(KeypointSet.uniform(p), KeypointSet.uniform(q))
        assert np.isclose(np.linalg.det(t.linear), 1.0)


class TestTps:
    """Thin-plate spline solve and evaluation."""

    def _pair(self, seed, n=12, noise=4.0):
        rng = np.random.default_rng(seed)
        p = rng.uniform(-40, 40, size=(n, 3))
        q = apply_h(random_g(rng, cond_max=3.0), p) + rng.normal(scale=noise, size=p.shape)
        return KeypointSet.uniform(p), KeypointSet.uniform(q)

    def test_kernel_is_pairwise_distance(self):
        rng = np.random.default_rng(12)
        a, b = rng.uniform(-10, 10, size=(5, 3)), rng.uniform(-10, 10, size=(7, 3))
        k = tps_kernel(a, b)
        assert k.shape == (5, 7)
        for i in range(5):
            for j in range(7):
                assert k[i, j] == pytest.approx(np.sqrt(np.sum((a[i] - b[j]) ** 2)), abs=1e-12)

    def test_identity_fit(self):
        rng = np.random.default_rng(11)
        p = KeypointSet.uniform(rng.uniform(-40, 40, size=(10, 3)))
        t = solve_tps(p, p, 1.0)
        assert np.allclose(t.affine_part, np.eye(4), atol=1e-9)
        assert np.allclose(t.warp_coefficients, 0.0, atol=1e-9)

    def test_interpolates_at_zero_lambda(self):
        km, kf = self._pair(12)
        t = solve_tps(km, kf, 0.0)
        assert np.max(np.abs(eval_tps(t, km.points) - kf.points)) < 1e-6

    def test_side_conditions(self):
        km, kf = self._pair(13)
        t = solve_tps(km, kf, 3.0)
        w = t.warp_coefficients
        assert np.allclose(w.sum(axis=0), 0.0, atol=1e-6)
        assert np.allclose(km.points.T @ w, 0.0, atol=1e-6)

    def test_large_lambda_matches_affine(self):
        km, kf = self._pair(14)
        t = solve_tps(km, kf, 1e8)
        a = solve_affine_weighted(km, kf)
        rng = np.random.default_rng(15)
        lo, hi = km.points.min(axis=0), km.points.max(axis=0)
        query = rng.uniform(lo, hi, size=(100, 3))
        assert np.max(np.linalg.norm(eval_tps(t, query) - a(query), axis=1)) < 1e-3

    def test_bending_energy_monotone(self):
        """Energy does not increase with lambda on 20 random pairs."""
        for seed in range(20):
            km, kf = self._pair(100 + seed)
            energies = [tps_bending_energy(solve_tps(km, kf, lam)) for lam in (0.0, 0.1, 1.0, 10.0, 100.0)]
            for a, b in zip(energies, energies[1:]):
                assert b <= a * (1 + 1e-9) + 1e-12

    def test_affine_field_has_no_energy(self):
        rng = np.random.default_rng(16)
        p = rng.uniform(-40, 40, size=(10, 3))
        g = random_g(rng)
        t = solve_tps(KeypointSet.uniform(p), KeypointSet.uniform(apply_h(g, p)), 0.0)
        assert tps_bending_energy(t) < 1e-9
        assert np.allclose(t.affine_part, g, atol=1e-6)

    def test_zero_coefficients_reduce_to_affine(self):
        g = random_g(np.random.default_rng(17))
        t = TpsTransform(np.eye(4, 3), g, np.zeros((4, 3)), 0.0)
        x = np.random.default_rng(18).normal(size=(5, 3))
        assert np.allclose(eval_tps(t, x), apply_h(g, x))
        assert tps_bending_energy(t) == 0.0

    def test_far_field_is_affine(self):
        km, kf = self._pair(19)
        t = solve_tps(km, kf, 0.0)
        diameter = np.linalg.norm(km.points.max(axis=0) - km.points.min(axis=0))
        far = km.points.mean(axis=0) + 10 * diameter * np.array([[1.0, 0.3, -0.2]]) / np.linalg.norm([1.0, 0.3, -0.2])
        disp_tps = eval_tps(t, far) - far
        disp_aff = apply_h(t.affine_part, far) - far
        assert np.linalg.norm(disp_tps - disp_aff) <= 0.05 * np.linalg.norm(disp_aff)

    def test_lambda_continuity(self):
        km, kf = self._pair(20)
        query = km.points + 1.5
        a = eval_tps(solve_tps(km, kf, 2.0), query)
        b = eval_tps(solve_tps(km, kf, 2.0 * (1 + 1e-6)), query)
        assert np.max(np.abs(a - b)) < 1e-3

    def test_duplicate_control_points(self):
        km, kf = self._pair(21)
        pts = km.points.copy()
        pts[3] = pts[2]
        with pytest.raises(DegenerateConfiguration):
            solve_tps(KeypointSet.uniform(pts), kf, 0.0)

    def test_duplicate_control_points_smoothed(self):
        """A positive ridge keeps the system solvable with coincident points."""
        km, kf = self._pair(21)
        pts = km.points.copy()
        pts[3] = pts[2]
        t = solve_tps(KeypointSet.uniform(pts), kf, 0.5)
        assert np.all(np.isfinite(t.warp_coefficients))

    def test_negative_lambda(self):
        km, kf = self._pair(22)
        with pytest.raises(ValueError):
            solve_tps(km, kf, -1.0)

    def test_invert_points(self):
        """Fixed-point inversion of a mild spline reproduces the query points."""
        rng = np.random.default_rng(23)
        p = rng.uniform(-40, 40, size=(12, 3))
        q = p + rng.normal(scale=1.5, size=p.shape)
        t = solve_tps(KeypointSet.uniform(p), KeypointSet.uniform(q), 5.0)
        x = rng.uniform(-20, 20, size=(10, 3))
        assert np.allclose(t(invert_points(t, x)), x, atol=1e-6)

    def test_invert_points_affine_exact(self):
        g = AffineTransform(random_g(np.random.default_rng(24)))
        x = np.array([[1.0, -2.0, 3.0]])
        assert np.allclose(g(invert_points(g, x)), x, atol=1e-9)


class TestDispatch:
    """solve_transform dispatch."""

    def test_kinds(self):
        rng = np.random.default_rng(25)
        p = KeypointSet.uniform(rng.uniform(-40, 40, size=(8, 3)))
        assert isinstance(solve_transform("affine", p, p), AffineTransform)
        assert isinstance(solve_transform("rigid", p, p), RigidTransform)
        assert isinstance(solve_transform("tps", p, p, 1.0), TpsTransform)

    def test_tps_needs_lambda(self):
        p = KeypointSet.uniform(np.random.default_rng(26).uniform(-40, 40, size=(8, 3)))
        with pytest.raises(ValueError):
            solve_transform("tps", p, p)

    def test_unknown(self):
        p = KeypointSet.uniform(np.random.default_rng(27).uniform(-40, 40, size=(8, 3)))
        with pytest.raises(ValueError):
            solve_transform("bspline", p, p)
