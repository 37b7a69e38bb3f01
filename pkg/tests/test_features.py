import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from angioflow.features import (FeatureNorms, SphereSampling, assemble, overlap_ratios,
                                backprojection_feature, bilinear_sample, circle_lens_area,
                                compute_features, disassemble, foreshortening_angle,
                                foreshortening_map, overlap_map)
from angioflow.projector import AttenuationModel, CArmTrajectory, forward_project
from angioflow.vessel_tree import TreeGenParams, generate_tree
from conftest import straight_tree
from oracles import monte_carlo_lens


class TestSphere:
    def test_unit_directions(self):
        d = SphereSampling(16).directions()
        assert d.shape == (16, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)

    def test_roughly_balanced(self):
        d = SphereSampling(200).directions()
        np.testing.assert_allclose(d.mean(axis=0), 0.0, atol=0.02)

    def test_zero_points(self):
        assert SphereSampling(0).directions().shape == (0, 3)


class TestBilinear:
    def test_constant_image(self):
        img = np.full((5, 7), 3.0)
        v, inside = bilinear_sample(img, np.array([0.0, 2.3, 6.0]), np.array([0.0, 3.7, 4.0]))
        np.testing.assert_allclose(v, 3.0)
        assert inside.all()

    def test_single_pixel(self):
        img = np.zeros((5, 7))
        img[2, 3] = 1.0
        v, _ = bilinear_sample(img, np.array([3.0, 3.5, 3.5, 2.0]), np.array([2.0, 2.0, 2.5, 2.0]))
        np.testing.assert_allclose(v, [1.0, 0.5, 0.25, 0.0])

    def test_outside_is_zero(self):
        img = np.ones((4, 4))
        v, inside = bilinear_sample(img, np.array([-0.1, 3.0, 3.01]), np.array([1.0, 3.0, 1.0]))
        np.testing.assert_array_equal(inside, [False, True, False])
        np.testing.assert_array_equal(v, [0.0, 1.0, 0.0])

    @given(st.floats(0, 6), st.floats(0, 4))
    def test_reproduces_linear_images(self, c, r):
        rows, cols = np.mgrid[0:5, 0:7]
        img = 0.3 * cols - 1.2 * rows + 2.0
        v, _ = bilinear_sample(img, np.array([c]), np.array([r]))
        assert v[0] == pytest.approx(0.3 * c - 1.2 * r + 2.0, abs=1e-12)


class TestBackprojection:
    def test_constant_stack(self, straight):
        traj = CArmTrajectory(det_rows=32, det_cols=32, n_frames=2)
        out = backprojection_feature(np.full((2, 32, 32), 0.7), traj, straight)
        np.testing.assert_allclose(out, 0.7)

    def test_shape_check(self, straight):
        traj = CArmTrajectory(det_rows=32, det_cols=32, n_frames=2)
        with pytest.raises(ValueError):
            backprojection_feature(np.zeros((3, 32, 32)), traj, straight)

    def test_tracks_concentration_on_isolated_perpendicular_vessel(self):
        tree = straight_tree(length=40.0, radius=1.5, direction=(0, 0, 1), start=(0, 0, -20.1))
        traj = CArmTrajectory(det_rows=96, det_cols=96, n_frames=12, delta_alpha=5.0)
        rng = np.random.default_rng(0)
        s = tree.arc_pos[:, None] / tree.arc_pos[-1]
        t = np.arange(12)[None, :] / 11
        c = 0.5 + 0.4 * np.sin(3 * s + 2 * t + rng.uniform(0, 1))
        stack = forward_project(tree, c, traj, AttenuationModel())
        feat = backprojection_feature(stack, traj, tree)
        interior = (tree.arc_pos > 3) & (tree.arc_pos < tree.arc_pos[-1] - 3)
        r = np.corrcoef(feat[interior].ravel(), c[interior].ravel())[0, 1]
        assert r > 0.99


class TestLens:
    def test_disjoint_and_contained(self):
        assert circle_lens_area(1.0, 1.0, 2.0) == 0.0
        assert circle_lens_area(1.0, 1.0, 0.0) == pytest.approx(math.pi)
        assert circle_lens_area(0.5, 2.0, 1.0) == pytest.approx(math.pi * 0.25)

    def test_unit_circles_at_unit_distance(self):
        expected = 2 * math.pi / 3 - math.sqrt(3) / 2
        assert expected == pytest.approx(1.228369698608757, abs=1e-15)
        assert circle_lens_area(1.0, 1.0, 1.0) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("r1,r2,d", [(1.0, 1.0, 1.0), (0.7, 1.3, 1.1), (2.0, 0.9, 2.5)])
    def test_monte_carlo(self, r1, r2, d):
        mc = monte_carlo_lens(r1, r2, d, 2_000_000, np.random.default_rng(4))
        assert circle_lens_area(r1, r2, d) == pytest.approx(mc, rel=5e-3)

    @given(st.floats(0.05, 5), st.floats(0.05, 5), st.floats(0, 12))
    def test_symmetric_and_bounded(self, r1, r2, d):
        a = circle_lens_area(r1, r2, d)
        assert a == pytest.approx(circle_lens_area(r2, r1, d), abs=1e-12)
        assert -1e-12 <= a <= math.pi * min(r1, r2) ** 2 * (1 + 1e-12)

    @given(st.floats(0.1, 3), st.floats(0.1, 3))
    def test_decreasing_in_distance(self, r1, r2):
        d = np.linspace(0, r1 + r2 + 0.5, 200)
        assert np.all(np.diff(circle_lens_area(r1, r2, d)) <= 1e-9)


class TestOverlap:
    def test_isolated_coincident_and_adjacent(self):
        assert overlap_ratios(np.array([[2.0, -1.0]]), np.array([1.7]))[0] == 1.0
        np.testing.assert_array_equal(overlap_ratios(np.zeros((2, 2)), np.full(2, 1.3)), 2.0)
        pair = overlap_ratios(np.array([[0.0, 0.0], [1.0, 0.0]]), np.ones(2))
        np.testing.assert_allclose(pair, 1.0 + 1.228369698608757 / math.pi)
        assert pair[0] == pytest.approx(1.391, abs=1e-3)

    @given(arrays(float, (12, 2), elements=st.floats(-5, 5)), arrays(float, 12, elements=st.floats(0.2, 2)))
    def test_bounds_and_pruning(self, uv, r):
        u = overlap_ratios(uv, r)
        assert np.array_equal(u, overlap_ratios(uv, r, exhaustive=True))
        assert np.all(u >= 1.0 - 1e-12) and np.all(u <= len(r) + 1e-9)

    def test_map_on_generated_tree(self):
        tree = generate_tree(TreeGenParams(depth=3), seed=7)
        traj = CArmTrajectory(n_frames=3, delta_alpha=30.0, det_rows=64, det_cols=64)
        fast = overlap_map(tree, traj)
        assert np.array_equal(fast, overlap_map(tree, traj, exhaustive=True))
        assert fast.min() >= 1.0 - 1e-12


class TestForeshortening:
    def test_reference_angles(self):
        rays = np.array([[1.0, 0, 0]] * 3)
        tangents = np.array([[0, 1.0, 0], [1.0, 0, 0], [math.sqrt(0.5), math.sqrt(0.5), 0]])
        np.testing.assert_allclose(foreshortening_angle(rays, tangents), [math.pi / 2, 0.0, math.pi / 4],
                                   atol=1e-7)

    @given(arrays(float, 3, elements=st.floats(-1, 1)), arrays(float, 3, elements=st.floats(-1, 1)))
    def test_range_and_sign_fold(self, a, b):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        v = foreshortening_angle(a, b)
        assert 0.0 <= v <= math.pi / 2
        assert v == foreshortening_angle(a, -b)

    def test_perpendicular_vessel_map(self):
        tree = straight_tree(length=10.0, direction=(0, 0, 1))
        out = foreshortening_map(tree, CArmTrajectory(n_frames=4, delta_alpha=20.0))
        np.testing.assert_allclose(out, math.pi / 2, atol=0.01)


class TestAssemble:
    def test_channels(self):
        norms = FeatureNorms(backprojection=0.5)
        z = assemble(np.zeros((2, 3)), np.ones((2, 3)), np.full((2, 3), math.pi / 2), norms)
        np.testing.assert_allclose(z.values[:, 0, 0], [0.0, 0.0, 1.0])

    def test_overlap_clip(self):
        norms = FeatureNorms(backprojection=1.0)
        U = np.array([[0.5, 1.0, 10.0, 14.0]])
        z = assemble(np.zeros_like(U), U, np.zeros_like(U), norms)
        np.testing.assert_allclose(z.values[1], [[0.0, 0.0, 1.0, 1.0]])

    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        I = rng.uniform(0, 0.2, (5, 4))
        U = rng.uniform(1, 10, (5, 4))
        V = rng.uniform(0, math.pi / 2, (5, 4))
        norms = FeatureNorms.for_tree(straight_tree(), mu_eff=0.25)
        assert norms.backprojection == pytest.approx(0.5)
        back = disassemble(assemble(I, U, V, norms))
        for x, y in zip(back, (I, U, V)):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_rejects_bad_input(self):
        norms = FeatureNorms(1.0)
        with pytest.raises(ValueError):
            assemble(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 3)), norms)
        with pytest.raises(ValueError):
            assemble(np.full((1, 1), np.nan), np.ones((1, 1)), np.zeros((1, 1)), norms)

    def test_compute_features_shape_and_ranges(self, ytree):
        traj = CArmTrajectory(n_frames=3, det_rows=48, det_cols=48)
        stack = forward_project(ytree, np.full((ytree.n_nodes, 3), 0.5), traj)
        f = compute_features(ytree, stack, AttenuationModel().mu_eff)
        assert f.values.shape == (3, ytree.n_nodes, 3)
        assert np.all((f.values[1] >= 0) & (f.values[1] <= 1))
        assert np.all((f.values[2] >= 0) & (f.values[2] <= 1))
