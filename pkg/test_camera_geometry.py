import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from camera_geometry import (
    BehindCameraError,
    CameraRig,
    CameraView,
    TriangulationDegenerateError,
    dlt_triangulate,
    grid_sample,
    grid_sample_jacobian,
    project_point,
    project_points,
    project_points_with_jacobian,
    read_keypoints,
    render_gaussian_heatmap,
    soft_argmax,
    soft_argmax_jacobian,
)
from hand_synthesis import make_rig


def _view(center=(0.0, 0.0, 0.0), rotation=None, focal=100.0, principal=(64.0, 64.0)):
    R = np.eye(3) if rotation is None else rotation
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ np.asarray(center, dtype=np.float64)
    K = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
    return CameraView(K=K, T=T, image_size=(128, 128))


class ProjectionTest(unittest.TestCase):
    def test_point_on_axis_hits_principal_point(self):
        self.assertEqual(project_point(_view(), np.array([0.0, 0.0, 2.0])), (64.0, 64.0))

    def test_translated_camera(self):
        u, v = project_point(_view(center=(1.0, 0.0, 0.0)), np.array([0.0, 0.0, 2.0]))
        self.assertAlmostEqual(u, 14.0)
        self.assertAlmostEqual(v, 64.0)

    def test_behind_camera_is_rejected(self):
        with self.assertRaises(BehindCameraError):
            project_point(_view(), np.array([0.0, 0.0, -1.0]))

    def test_rejects_improper_rotation(self):
        with self.assertRaises(ValueError):
            _view(rotation=np.diag([1.0, 1.0, -1.0]))

    def test_projection_jacobian_matches_finite_differences(self):
        rotation = Rotation.from_euler("xyz", [0.2, -0.3, 0.1]).as_matrix()
        view = _view(center=(10.0, -5.0, -400.0), rotation=rotation)
        points = np.random.default_rng(2).uniform(-50, 50, size=(5, 3))
        _, jac = project_points_with_jacobian(view, points)
        h = 1e-5
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            numeric = (project_points(view, points + step) - project_points(view, points - step)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, axis], numeric, atol=1e-6)


class HeatmapTest(unittest.TestCase):
    def test_peak_at_pixel_center(self):
        h = render_gaussian_heatmap((10.0, 20.0), (64, 64), 2.0)
        self.assertEqual(h[20, 10], 1.0)
        self.assertEqual(np.unravel_index(np.argmax(h), h.shape), (20, 10))

    def test_value_one_sigma_away(self):
        h = render_gaussian_heatmap((10.0, 20.0), (64, 64), 2.0)
        self.assertAlmostEqual(h[20, 12], np.exp(-0.5), places=12)

    def test_peak_outside_image_stays_finite_and_small(self):
        h = render_gaussian_heatmap((-10.0, 30.0), (64, 64), 2.0)
        self.assertTrue(np.all(np.isfinite(h)))
        self.assertLess(h.max(), np.exp(-(10.0 ** 2) / 8.0) + 1e-15)

    def test_soft_argmax_delta(self):
        h = np.zeros((64, 64))
        h[20, 10] = 1.0
        u, v = soft_argmax(h, temperature=100.0)
        self.assertAlmostEqual(u, 10.0, delta=1e-3)
        self.assertAlmostEqual(v, 20.0, delta=1e-3)

    def test_soft_argmax_uniform_is_center(self):
        u, v = soft_argmax(np.full((64, 48), 0.3))
        self.assertAlmostEqual(u, 23.5, places=9)
        self.assertAlmostEqual(v, 31.5, places=9)

    def test_soft_argmax_two_equal_peaks(self):
        h = np.zeros((64, 64))
        h[10, 10] = 1.0
        h[10, 30] = 1.0
        u, v = soft_argmax(h, temperature=100.0)
        self.assertAlmostEqual(u, 20.0, delta=1e-6)
        self.assertAlmostEqual(v, 10.0, delta=1e-6)

    def test_log_readout_recovers_subpixel_peak(self):
        stack = np.stack([render_gaussian_heatmap((21.3, 40.7), (64, 64), 2.0)])
        keypoints = read_keypoints(stack, downsample=4.0)
        np.testing.assert_allclose(keypoints[0], [85.2, 162.8], atol=1e-5)

    def test_soft_argmax_jacobian_matches_finite_differences(self):
        h = np.random.default_rng(0).uniform(size=(6, 7))
        jac = soft_argmax_jacobian(h, temperature=2.0)
        eps = 1e-6
        for (row, col) in [(0, 0), (3, 4), (5, 6)]:
            bumped = h.copy()
            bumped[row, col] += eps
            lowered = h.copy()
            lowered[row, col] -= eps
            numeric = (np.array(soft_argmax(bumped, 2.0)) - np.array(soft_argmax(lowered, 2.0))) / (2 * eps)
            np.testing.assert_allclose(jac[:, row, col], numeric, atol=1e-7)


class TriangulationTest(unittest.TestCase):
    def test_two_camera_example(self):
        rig = CameraRig([_view(), _view(center=(1.0, 0.0, 0.0))])
        X = np.array([[0.0, 0.0, 2.0]])
        keypoints = np.stack([project_points(view, X) for view in rig.views])
        np.testing.assert_allclose(dlt_triangulate(keypoints, rig), X, atol=1e-6)

    def test_noiseless_round_trip_for_several_rig_sizes(self):
        rng = np.random.default_rng(21)
        for n_views in (2, 4, 8):
            for trial in range(16):
                rig = make_rig(n_views, 600.0, (0.0, 0.0, 0.0), 300.0, (256, 256), seed=trial)
                X = rng.uniform(-100.0, 100.0, size=(21, 3))
                keypoints = np.stack([project_points(view, X) for view in rig.views])
                recovered = dlt_triangulate(keypoints, rig)
                self.assertLess(np.abs(recovered - X).max(), 1e-6)
                for view, pixels in zip(rig.views, keypoints):
                    np.testing.assert_allclose(project_points(view, recovered), pixels, atol=1e-4)

    def test_pixel_noise_error_shrinks_with_more_views(self):
        rng = np.random.default_rng(4)
        errors = []
        for n_views in (2, 4, 8):
            trial_errors = []
            for trial in range(40):
                rig = make_rig(n_views, 600.0, (0.0, 0.0, 0.0), 300.0, (256, 256), seed=trial)
                X = rng.uniform(-100.0, 100.0, size=(21, 3))
                keypoints = np.stack([project_points(view, X) for view in rig.views])
                keypoints = keypoints + rng.normal(0.0, 1.0, size=keypoints.shape)
                trial_errors.append(np.linalg.norm(dlt_triangulate(keypoints, rig) - X, axis=1).mean())
            errors.append(float(np.mean(trial_errors)))
        self.assertGreater(errors[0], 0.0)
        self.assertGreater(errors[0], errors[1])
        self.assertGreater(errors[1], errors[2])

    def test_coincident_cameras_are_degenerate(self):
        rig = CameraRig([_view(), _view()])
        keypoints = np.stack([project_points(view, np.array([[0.1, 0.2, 2.0]])) for view in rig.views])
        with self.assertRaises(TriangulationDegenerateError) as ctx:
            dlt_triangulate(keypoints, rig)
        self.assertEqual(ctx.exception.keypoint_index, 0)

    def test_single_view_is_rejected(self):
        with self.assertRaises(ValueError):
            dlt_triangulate(np.zeros((1, 21, 2)), CameraRig([_view()]))


class GridSampleTest(unittest.TestCase):
    def setUp(self):
        self.fmap = np.arange(2 * 4 * 5, dtype=np.float64).reshape(2, 4, 5)

    def test_integer_pixel_returns_stored_value(self):
        np.testing.assert_array_equal(grid_sample(self.fmap, (3.0, 2.0)), self.fmap[:, 2, 3])

    def test_midpoint_averages_neighbors(self):
        expected = 0.5 * (self.fmap[:, 1, 1] + self.fmap[:, 1, 2])
        np.testing.assert_allclose(grid_sample(self.fmap, (1.5, 1.0)), expected)

    def test_outside_map_is_zero(self):
        np.testing.assert_array_equal(grid_sample(self.fmap, (-5.0, 20.0)), np.zeros(2))

    def test_non_finite_point_is_zero(self):
        np.testing.assert_array_equal(grid_sample(self.fmap, (np.nan, 1.0)), np.zeros(2))

    def test_in_bounds_sample_is_bounded_by_neighbors(self):
        sample = grid_sample(self.fmap, (2.3, 1.7))
        neighbors = self.fmap[:, 1:3, 2:4].reshape(2, -1)
        self.assertTrue(np.all(sample >= neighbors.min(axis=1)))
        self.assertTrue(np.all(sample <= neighbors.max(axis=1)))

    def test_jacobian_matches_finite_differences(self):
        p = (2.3, 1.7)
        jac = grid_sample_jacobian(self.fmap, p)
        h = 1e-6
        du = (grid_sample(self.fmap, (p[0] + h, p[1])) - grid_sample(self.fmap, (p[0] - h, p[1]))) / (2 * h)
        dv = (grid_sample(self.fmap, (p[0], p[1] + h)) - grid_sample(self.fmap, (p[0], p[1] - h))) / (2 * h)
        np.testing.assert_allclose(jac, np.stack([du, dv], axis=1), atol=1e-6)


if __name__ == "__main__":
    unittest.main()
