"""Tests for the synthetic phantom generator."""

import math
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from coords import apply_affine, voxel_to_world
from errors import IoFailure, ParseError
from phantom import (
    PhantomShape,
    PhantomSpec,
    analytic_field,
    field_of_view,
    format_spec,
    grid_for,
    make_pair,
    mild_tps,
    orientation_affine,
    parse_spec,
    read_spec,
    render,
    translation,
)
from metrics import soft_dice
from solvers import TpsTransform
from warp import registration_transform, warp_to_fixed_grid
from worker_pool import WorkerPool

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")


def one_sphere(radius=6.0, noise=0.0):
    return PhantomSpec(
        shapes=[PhantomShape(center=(2.0, -3.0, 1.0), radii=(radius,) * 3, intensity=1.0, label=1)],
        noise_sigma=noise,
        rng_seed=3,
    )


def two_shapes():
    return PhantomSpec(shapes=[
        PhantomShape(center=(-8.0, 0.0, 0.0), radii=(4.0, 5.0, 6.0), intensity=0.8, label=1),
        PhantomShape(center=(9.0, 2.0, -1.0), radii=(5.0, 5.0, 5.0), intensity=0.5, label=2),
    ])


def label_centroid(vol, label):
    idx = np.argwhere(vol.labels == label).astype(np.float64)
    return apply_affine(vol.affine.matrix, idx).mean(axis=0)


class TestSpecFormat:
    """Phantom description files."""

    def test_quickstart_file(self):
        spec = read_spec(os.path.join(DATA_DIR, "quickstart_phantom.txt"))
        assert len(spec.shapes) == 8
        assert spec.rng_seed == 7
        assert spec.noise_sigma == 0.0
        assert spec.shapes[-1].center == (13.0, 11.0, 14.0)
        assert [s.label for s in spec.shapes] == list(range(1, 9))

    def test_round_trip(self):
        spec = two_shapes()
        assert parse_spec(format_spec(spec)) == spec

    def test_comments_and_blank_lines(self):
        spec = parse_spec("# header\n\nsphere 0 0 0 3 1.0 4  # trailing\n")
        assert spec.shapes[0].radii == (3.0, 3.0, 3.0)
        assert spec.shapes[0].label == 4

    @pytest.mark.parametrize("text,line", [
        ("sphere 0 0 0 3 1.0 1\ncube 0 0 0 1 1\n", 2),
        ("sphere 0 0 0 3 1.0\n", 1),
        ("sphere 0 0 0 3 1.0 1\nsphere 0 0 x 3 1.0 2\n", 2),
        ("ellipsoid 0 0 0 1 -2 1 1.0 1\n", 1),
        ("sphere 0 0 0 3 1.0 1.5\n", 1),
        ("noise -1\nsphere 0 0 0 3 1.0 1\n", 1),
        ("seed many\n", 1),
    ])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(ParseError) as info:
            parse_spec(text)
        assert info.value.line == line

    def test_unknown_directive_column(self):
        with pytest.raises(ParseError) as info:
            parse_spec("sphere 0 0 0 3 1.0 1\n  box 1 2 3\n")
        assert info.value.column == 3

    def test_duplicate_labels(self):
        with pytest.raises(ParseError):
            parse_spec("sphere 0 0 0 3 1.0 1\nsphere 9 9 9 3 1.0 1\n")

    def test_empty(self):
        with pytest.raises(ParseError):
            parse_spec("# nothing\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoFailure):
            read_spec(tmp_path / "absent.txt")


class TestGeometry:
    """Grids and orientations."""

    def test_axial_is_diagonal(self):
        a = orientation_affine((1.0, 2.0, 3.0), "axial")
        assert np.allclose(a.linear, np.diag([1.0, 2.0, 3.0]))

    def test_coronal_swaps_axes(self):
        a = orientation_affine((1.0, 2.0, 3.0), "coronal")
        assert np.allclose(voxel_to_world(a, (1, 0, 0)), (0, 0, 1.0))
        assert np.allclose(voxel_to_world(a, (0, 0, 1)), (3.0, 0, 0))

    def test_unknown_orientation(self):
        with pytest.raises(ValueError):
            orientation_affine((1, 1, 1), "oblique")

    def test_grid_centred_on_box(self):
        lo, hi = np.array([-10.0, -4.0, 0.0]), np.array([10.0, 6.0, 30.0])
        dims, affine = grid_for(lo, hi, (2.0, 2.0, 3.0), "sagittal")
        centre = voxel_to_world(affine, (np.asarray(dims) - 1) / 2.0)
        assert np.allclose(centre, (lo + hi) / 2.0)
        corners = apply_affine(affine.matrix, np.array([[0, 0, 0], np.asarray(dims) - 1], dtype=float))
        assert np.all(corners.min(axis=0) <= lo + 1e-9)
        assert np.all(corners.max(axis=0) >= hi - 1e-9)

    def test_field_of_view_follows_transform(self):
        spec = one_sphere()
        lo, hi = field_of_view(spec, translation((10.0, 0.0, 0.0)), pad_mm=0.0)
        assert np.allclose(lo, (6.0, -9.0, -5.0))
        assert np.allclose(hi, (18.0, 3.0, 7.0))


class TestRender:
    """Rasterisation."""

    def test_volume_matches_analytic(self):
        spec = one_sphere()
        dims, affine = grid_for(*field_of_view(spec), (1.0, 1.0, 1.0))
        vol = render(spec, dims, affine)
        expected = 4.0 / 3.0 * math.pi * 6.0 ** 3
        assert abs(vol.data.sum() - expected) / expected < 0.03
        assert abs((vol.labels == 1).sum() - expected) / expected < 0.1

    def test_anisotropic_spacing(self):
        spec = one_sphere()
        dims, affine = grid_for(*field_of_view(spec), (1.0, 1.0, 3.0))
        vol = render(spec, dims, affine)
        expected = 4.0 / 3.0 * math.pi * 6.0 ** 3
        assert abs(vol.data.sum() * 3.0 - expected) / expected < 0.08
        assert np.allclose(label_centroid(vol, 1), (2.0, -3.0, 1.0), atol=0.6)

    def test_values_in_range_without_noise(self):
        spec = two_shapes()
        dims, affine = grid_for(*field_of_view(spec), (1.5, 1.5, 1.5))
        vol = render(spec, dims, affine)
        assert vol.data.min() >= 0.0
        assert vol.data.max() <= 0.8 + 1e-6
        assert set(np.unique(vol.labels)) == {0, 1, 2}

    def test_noise_is_seeded(self):
        spec = one_sphere(noise=0.1)
        dims, affine = grid_for(*field_of_view(spec), (2.0, 2.0, 2.0))
        a = render(spec, dims, affine)
        b = render(spec, dims, affine)
        c = render(spec, dims, affine, seed_offset=1)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
        assert np.array_equal(a.labels, c.labels)

    def test_threads_bit_identical(self):
        spec = two_shapes()
        dims, affine = grid_for(*field_of_view(spec), (2.0, 2.0, 2.0))
        a = render(spec, dims, affine, pool=WorkerPool(1))
        b = render(spec, dims, affine, pool=WorkerPool(3))
        assert np.array_equal(a.data, b.data)

    def test_analytic_field(self):
        values, labels = analytic_field(two_shapes(), np.array([[-8.0, 0.0, 0.0], [9.0, 2.0, -1.0], [50.0, 0.0, 0.0]]))
        assert values.tolist() == [0.8, 0.5, 0.0]
        assert labels.tolist() == [1, 2, 0]


class TestPairs:
    """Registered pairs with known ground truth."""

    def test_translation_pair(self):
        g = translation((10.0, -5.0, 3.0))
        truth = make_pair(two_shapes(), g, (1.0, 1.0, 1.0), (2.0, 2.0, 2.0))
        km, kf = truth.true_keypoints
        assert np.allclose(kf.points - km.points, (10.0, -5.0, 3.0))
        for label, center in zip((1, 2), km.points):
            assert np.allclose(label_centroid(truth.fixed, label), center + (10.0, -5.0, 3.0), atol=0.6)
            assert np.allclose(label_centroid(truth.moving, label), center, atol=0.4)

    def test_reoriented_fixed(self):
        g = translation((0.0, 4.0, -2.0))
        truth = make_pair(two_shapes(), g, (1.0, 1.0, 1.0), (1.5, 1.0, 2.0), orientation_f="coronal")
        assert not np.allclose(truth.fixed.affine.linear, np.diag(truth.fixed.affine.spacing))
        for label, center in zip((1, 2), truth.fixed_keypoints.points):
            assert np.allclose(label_centroid(truth.fixed, label), center, atol=0.8)

    def test_mild_tps_bounded(self):
        spec = two_shapes()
        g = mild_tps(spec, max_displacement_mm=4.0, seed=1)
        assert isinstance(g, TpsTransform)
        moved = np.linalg.norm(g(spec.centers) - spec.centers, axis=1)
        assert np.all(moved <= 4.0 + 0.1)
        assert np.all(moved >= 1.0)
        anchors = np.array([field_of_view(spec)[0]])
        assert np.allclose(g(anchors), anchors, atol=0.1)

    def test_mild_tps_pair(self):
        spec = two_shapes()
        g = mild_tps(spec, max_displacement_mm=3.0, seed=2)
        truth = make_pair(spec, g, (2.0, 2.0, 2.0), (2.0, 2.0, 2.0))
        for label, center in zip((1, 2), truth.fixed_keypoints.points):
            assert np.allclose(label_centroid(truth.fixed, label), center, atol=1.0)


def label_dice(truth, kind, lam=None):
    km, kf = truth.true_keypoints
    t = registration_transform(kind, km, kf, lam=lam)
    warped = warp_to_fixed_grid(truth.moving, truth.fixed, t)
    return float(np.mean(list(soft_dice(warped.labels, truth.fixed.labels, range(1, 9)).values())))


class TestMildTpsRecovery:
    """Smooth TPS against affine on bounded non-linear ground truths."""

    def test_tps_beats_affine(self):
        spec = read_spec(os.path.join(DATA_DIR, "quickstart_phantom.txt"))
        pool = WorkerPool(4)
        wins = 0
        for seed in range(20):
            g = mild_tps(spec, 5.0, seed=seed)
            truth = make_pair(spec, g, (2.0, 2.0, 2.0), (2.0, 2.0, 2.0), pool=pool)
            if label_dice(truth, "tps", lam=10.0) > label_dice(truth, "affine"):
                wins += 1
        assert wins >= 18
